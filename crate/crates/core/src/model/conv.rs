//! 3x3 same-padded convolution and 2x2 max pooling on single samples stored
//! as `channels x (height * width)` matrices.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Plane {
    pub height: usize,
    pub width: usize,
}

impl Plane {
    pub fn area(self) -> usize {
        self.height * self.width
    }

    pub fn halved(self) -> Plane {
        Plane {
            height: self.height / 2,
            width: self.width / 2,
        }
    }
}

/// Unrolls 3x3 neighbourhoods into a `(channels * 9) x area` matrix.
pub(crate) fn im2col(input: ArrayView2<f64>, plane: Plane) -> Array2<f64> {
    let channels = input.nrows();
    let (h, w) = (plane.height as isize, plane.width as isize);
    let mut cols = Array2::zeros((channels * 9, plane.area()));
    for c in 0..channels {
        let src = input.row(c);
        for ky in 0..3isize {
            for kx in 0..3isize {
                let mut dst = cols.row_mut(c * 9 + (ky * 3 + kx) as usize);
                for y in 0..h {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kx - 1;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: ArrayView2<f64>, channels: usize, plane: Plane) -> Array2<f64> {
    let (h, w) = (plane.height as isize, plane.width as isize);
    let mut out = Array2::zeros((channels, plane.area()));
    for c in 0..channels {
        let mut dst = out.row_mut(c);
        for ky in 0..3isize {
            for kx in 0..3isize {
                let src = cols.row(c * 9 + (ky * 3 + kx) as usize);
                for y in 0..h {
                    let sy = y + ky - 1;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kx - 1;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        dst[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pooling; returns pooled values and the flat source index
/// of each maximum (first on ties).
pub(crate) fn max_pool(input: ArrayView2<f64>, plane: Plane) -> (Array2<f64>, Vec<usize>) {
    let out_plane = plane.halved();
    let channels = input.nrows();
    let mut out = Array2::zeros((channels, out_plane.area()));
    let mut argmax = Vec::with_capacity(channels * out_plane.area());
    for c in 0..channels {
        let src = input.row(c);
        for y in 0..out_plane.height {
            for x in 0..out_plane.width {
                let mut best = (2 * y) * plane.width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * plane.width + 2 * x + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[(c, y * out_plane.width + x)] = src[best];
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn max_pool_backward(
    grad: ArrayView2<f64>,
    argmax: &[usize],
    plane: Plane,
) -> Array2<f64> {
    let channels = grad.nrows();
    let pooled = grad.ncols();
    let mut out = Array2::zeros((channels, plane.area()));
    for c in 0..channels {
        for i in 0..pooled {
            out[(c, argmax[c * pooled + i])] += grad[(c, i)];
        }
    }
    out
}
