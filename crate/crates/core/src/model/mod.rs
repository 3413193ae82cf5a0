//! Encoder, classifier head and projection head with hand-written backprop.
//!
//! Parameters live in one flat `Vec<f64>` so that SGD, EMA and checkpointing
//! operate on plain slices. [`Network`] only holds the architecture.

mod conv;
mod spec;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use conv::Plane;
pub use spec::{count_params, linear_param_count, BackboneKind, BackboneSpec, ParamCount};
use spec::{Layout, Slot};

/// Representation, logits and projection embedding for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelOutput {
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
    pub z: Vec<f64>,
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout masks are drawn from a stream seeded by `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
enum EncoderCache {
    /// Post-activation outputs of every layer, starting with the input.
    Mlp(Vec<Array2<f64>>),
    Cnn(Vec<ConvBlockCache>),
}

#[derive(Debug, Clone)]
struct ConvBlockCache {
    in_plane: Plane,
    in_channels: usize,
    cols: Vec<Array2<f64>>,
    activations: Vec<Array2<f64>>,
    argmax: Vec<Vec<usize>>,
}

/// Batched forward result, kept around for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub h: Array2<f64>,
    pub logits: Array2<f64>,
    pub z: Array2<f64>,
    encoder: EncoderCache,
    dropout_scale: Option<Array2<f64>>,
    h_dropped: Array2<f64>,
    projection_hidden: Array2<f64>,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output(&self, i: usize) -> ModelOutput {
        ModelOutput {
            h: self.h.row(i).to_vec(),
            logits: self.logits.row(i).to_vec(),
            z: self.z.row(i).to_vec(),
        }
    }
}

fn view<'a>(params: &'a [f64], slot: Slot) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((slot.rows, slot.cols), &params[slot.range()]).expect("slot shape")
}

fn bias<'a>(params: &'a [f64], slot: Slot) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[slot.range()])
}

fn view_mut<'a>(grads: &'a mut [f64], slot: Slot) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((slot.rows, slot.cols), &mut grads[slot.range()]).expect("slot shape")
}

fn bias_mut<'a>(grads: &'a mut [f64], slot: Slot) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut grads[slot.range()])
}

fn relu_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes gradient entries where the cached ReLU output is not positive.
fn relu_backward(grad: &mut Array2<f64>, activation: &Array2<f64>) {
    grad.zip_mut_with(activation, |g, &a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

/// `x W^T + b`.
fn dense(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += &b;
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn dense_backward(
    grad_out: &Array2<f64>,
    input: &Array2<f64>,
    params: &[f64],
    grads: &mut [f64],
    w: Slot,
    b: Slot,
    need_input_grad: bool,
) -> Option<Array2<f64>> {
    general_mat_mul(1.0, &grad_out.t(), input, 1.0, &mut view_mut(grads, w));
    bias_mut(grads, b).scaled_add(1.0, &grad_out.sum_axis(Axis(0)));
    need_input_grad.then(|| grad_out.dot(&view(params, w)))
}

/// Architecture plus parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: BackboneSpec,
    layout: Layout,
}

impl Network {
    pub fn new(spec: BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        Ok(Self { spec, layout })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Fan-in scaled Gaussian weights (He for ReLU-fed layers), zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let mut params = vec![0.0; self.layout.total];
        let slots = &self.layout.slots;
        let linear_out = [self.layout.classifier, self.layout.projection + 2];
        for (i, slot) in slots.iter().enumerate().step_by(2) {
            let gain = if linear_out.contains(&i) { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / slot.cols as f64).sqrt()).expect("finite std");
            for p in &mut params[slot.range()] {
                *p = normal.sample(&mut rng);
            }
        }
        params
    }

    fn check(&self, params: &[f64], inputs: ArrayView2<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(Error::input("empty batch"));
        }
        if inputs.ncols() != self.spec.input_len() {
            return Err(Error::input(format!(
                "inputs have {} features, network expects {}",
                inputs.ncols(),
                self.spec.input_len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[f64], inputs: ArrayView2<f64>, mode: ForwardMode) -> Result<Forward> {
        self.check(params, inputs)?;
        let (h, encoder) = match &self.spec.kind {
            BackboneKind::Mlp { .. } => self.mlp_forward(params, inputs),
            BackboneKind::SmallCnn {
                channels,
                height,
                width,
                ..
            } => self.cnn_forward(
                params,
                inputs,
                *channels,
                Plane {
                    height: *height,
                    width: *width,
                },
            ),
        };

        let dropout_scale = match mode {
            ForwardMode::Train { seed } if self.spec.dropout > 0.0 => {
                let keep = 1.0 - self.spec.dropout;
                let mut rng = stream_rng(seed, Stream::Dropout, 0, 0);
                Some(Array2::from_shape_fn(h.raw_dim(), |_| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        };
        let h_dropped = match &dropout_scale {
            Some(scale) => &h * scale,
            None => h.clone(),
        };

        let slots = &self.layout.slots;
        let (c, p) = (self.layout.classifier, self.layout.projection);
        let logits = dense(h_dropped.view(), view(params, slots[c]), bias(params, slots[c + 1]));
        let mut projection_hidden =
            dense(h_dropped.view(), view(params, slots[p]), bias(params, slots[p + 1]));
        relu_in_place(&mut projection_hidden);
        let z = dense(
            projection_hidden.view(),
            view(params, slots[p + 2]),
            bias(params, slots[p + 3]),
        );

        Ok(Forward {
            h,
            logits,
            z,
            encoder,
            dropout_scale,
            h_dropped,
            projection_hidden,
        })
    }

    fn mlp_forward(&self, params: &[f64], inputs: ArrayView2<f64>) -> (Array2<f64>, EncoderCache) {
        let mut activations = vec![inputs.to_owned()];
        for layer in self.layout.slots[..self.layout.encoder_slots].chunks_exact(2) {
            let prev = activations.last().expect("input present");
            let mut a = dense(prev.view(), view(params, layer[0]), bias(params, layer[1]));
            relu_in_place(&mut a);
            activations.push(a);
        }
        let h = activations.last().expect("input present").clone();
        (h, EncoderCache::Mlp(activations))
    }

    fn cnn_forward(
        &self,
        params: &[f64],
        inputs: ArrayView2<f64>,
        channels: usize,
        plane: Plane,
    ) -> (Array2<f64>, EncoderCache) {
        let n = inputs.nrows();
        let mut current: Vec<Array2<f64>> = inputs
            .outer_iter()
            .map(|row| {
                row.to_owned()
                    .into_shape_with_order((channels, plane.area()))
                    .expect("input length checked")
            })
            .collect();
        let mut in_plane = plane;
        let mut in_channels = channels;
        let mut caches = Vec::with_capacity(3);
        for layer in self.layout.slots[..self.layout.encoder_slots].chunks_exact(2) {
            let w = view(params, layer[0]);
            let b = bias(params, layer[1]).insert_axis(Axis(1));
            let mut cache = ConvBlockCache {
                in_plane,
                in_channels,
                cols: Vec::with_capacity(n),
                activations: Vec::with_capacity(n),
                argmax: Vec::with_capacity(n),
            };
            let mut next = Vec::with_capacity(n);
            for x in &current {
                let cols = conv::im2col(x.view(), in_plane);
                let mut a = w.dot(&cols);
                a += &b;
                relu_in_place(&mut a);
                let (pooled, argmax) = conv::max_pool(a.view(), in_plane);
                cache.cols.push(cols);
                cache.activations.push(a);
                cache.argmax.push(argmax);
                next.push(pooled);
            }
            caches.push(cache);
            current = next;
            in_plane = in_plane.halved();
            in_channels = layer[0].rows;
        }
        let mut h = Array2::zeros((n, in_channels));
        for (mut row, x) in h.outer_iter_mut().zip(&current) {
            row.assign(&x.mean_axis(Axis(1)).expect("non-empty plane"));
        }
        (h, EncoderCache::Cnn(caches))
    }

    /// Backpropagates `d_logits` and `d_z` (gradients of a scalar loss with
    /// respect to the batch logits and embeddings), accumulating into `grads`.
    pub fn backward(
        &self,
        params: &[f64],
        fwd: &Forward,
        d_logits: ArrayView2<f64>,
        d_z: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.layout.total || params.len() != self.layout.total {
            return Err(Error::input("parameter/gradient length mismatch"));
        }
        if d_logits.dim() != fwd.logits.dim() || d_z.dim() != fwd.z.dim() {
            return Err(Error::input("upstream gradient shape mismatch"));
        }
        let slots = &self.layout.slots;
        let (c, p) = (self.layout.classifier, self.layout.projection);
        let d_logits = d_logits.to_owned();
        let d_z = d_z.to_owned();

        let mut d_h = dense_backward(&d_logits, &fwd.h_dropped, params, grads, slots[c], slots[c + 1], true)
            .expect("requested");
        let mut d_u = dense_backward(
            &d_z,
            &fwd.projection_hidden,
            params,
            grads,
            slots[p + 2],
            slots[p + 3],
            true,
        )
        .expect("requested");
        relu_backward(&mut d_u, &fwd.projection_hidden);
        d_h += &dense_backward(&d_u, &fwd.h_dropped, params, grads, slots[p], slots[p + 1], true)
            .expect("requested");
        if let Some(scale) = &fwd.dropout_scale {
            d_h *= scale;
        }

        match &fwd.encoder {
            EncoderCache::Mlp(activations) => self.mlp_backward(params, activations, d_h, grads),
            EncoderCache::Cnn(caches) => self.cnn_backward(params, caches, d_h, grads),
        }
        Ok(())
    }

    fn mlp_backward(&self, params: &[f64], activations: &[Array2<f64>], d_h: Array2<f64>, grads: &mut [f64]) {
        let layers: Vec<&[Slot]> = self.layout.slots[..self.layout.encoder_slots].chunks_exact(2).collect();
        let mut grad = d_h;
        for (k, layer) in layers.iter().enumerate().rev() {
            relu_backward(&mut grad, &activations[k + 1]);
            match dense_backward(&grad, &activations[k], params, grads, layer[0], layer[1], k > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }

    fn cnn_backward(&self, params: &[f64], caches: &[ConvBlockCache], d_h: Array2<f64>, grads: &mut [f64]) {
        let layers: Vec<&[Slot]> = self.layout.slots[..self.layout.encoder_slots].chunks_exact(2).collect();
        let last_area = caches
            .last()
            .map(|c| c.in_plane.halved().area())
            .expect("three blocks");
        // global average pooling
        let mut grad: Vec<Array2<f64>> = d_h
            .outer_iter()
            .map(|row| {
                let col = row.to_owned().insert_axis(Axis(1)) / last_area as f64;
                col.broadcast((row.len(), last_area)).expect("broadcast").to_owned()
            })
            .collect();
        for (k, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
            let w = view(params, layer[0]);
            let mut next = Vec::with_capacity(grad.len());
            for (i, g) in grad.iter().enumerate() {
                let mut d_act = conv::max_pool_backward(g.view(), &cache.argmax[i], cache.in_plane);
                relu_backward(&mut d_act, &cache.activations[i]);
                general_mat_mul(1.0, &d_act, &cache.cols[i].t(), 1.0, &mut view_mut(grads, layer[0]));
                bias_mut(grads, layer[1]).scaled_add(1.0, &d_act.sum_axis(Axis(1)));
                if k > 0 {
                    let d_cols = w.t().dot(&d_act);
                    next.push(conv::col2im(d_cols.view(), cache.in_channels, cache.in_plane));
                }
            }
            grad = next;
        }
    }
}

/// Gradient buffer matching a parameter vector.
pub fn zeros_like(params: &[f64]) -> Vec<f64> {
    vec![0.0; params.len()]
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// L2-normalizes each row, returning the normalized rows and their norms.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.clone();
    for (mut row, &n) in out.outer_iter_mut().zip(&norms) {
        if n > 0.0 {
            row /= n;
        }
    }
    (out, norms)
}
