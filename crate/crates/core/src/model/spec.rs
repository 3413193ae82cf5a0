use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Encoder family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneKind {
    /// Fully connected ReLU stack; `hidden` may be empty, in which case the
    /// representation is the raw input.
    Mlp { input_dim: usize, hidden: Vec<usize> },
    /// Three `conv3x3 -> relu -> maxpool2x2` blocks followed by global average
    /// pooling. Image height and width must be divisible by 8.
    SmallCnn {
        channels: usize,
        height: usize,
        width: usize,
        conv_channels: [usize; 3],
    },
}

/// Full architecture: encoder, classifier head and projection head widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Projection embedding width `D`.
    pub projection_dim: usize,
    /// Number of classes `L`.
    pub num_classes: usize,
    /// Inverted-dropout rate on the representation, active in train mode only.
    #[serde(default)]
    pub dropout: f64,
}

impl BackboneSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, projection_dim: usize, num_classes: usize) -> Result<Self> {
        Self {
            kind: BackboneKind::Mlp { input_dim, hidden },
            projection_dim,
            num_classes,
            dropout: 0.0,
        }
        .validated()
    }

    pub fn small_cnn(
        channels: usize,
        height: usize,
        width: usize,
        conv_channels: [usize; 3],
        projection_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Self {
            kind: BackboneKind::SmallCnn {
                channels,
                height,
                width,
                conv_channels,
            },
            projection_dim,
            num_classes,
            dropout: 0.0,
        }
        .validated()
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        self.dropout = rate;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_dim < 2 {
            return Err(Error::config(format!(
                "projection width must be at least 2, got {}",
                self.projection_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        match &self.kind {
            BackboneKind::Mlp { input_dim, hidden } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(Error::config("mlp layer widths must be positive"));
                }
            }
            BackboneKind::SmallCnn {
                channels,
                height,
                width,
                conv_channels,
            } => {
                if *channels == 0 || conv_channels.contains(&0) {
                    return Err(Error::config("cnn channel counts must be positive"));
                }
                if *height == 0 || *width == 0 || height % 8 != 0 || width % 8 != 0 {
                    return Err(Error::config(format!(
                        "small_cnn needs image sides divisible by 8, got {height}x{width}"
                    )));
                }
            }
        }
        let h = self.representation_dim();
        if h < self.projection_dim {
            return Err(Error::config(format!(
                "representation width {h} is smaller than projection width {}",
                self.projection_dim
            )));
        }
        Ok(())
    }

    /// Flattened input length.
    pub fn input_len(&self) -> usize {
        match &self.kind {
            BackboneKind::Mlp { input_dim, .. } => *input_dim,
            BackboneKind::SmallCnn {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    /// Representation width `H`.
    pub fn representation_dim(&self) -> usize {
        match &self.kind {
            BackboneKind::Mlp { input_dim, hidden } => *hidden.last().unwrap_or(input_dim),
            BackboneKind::SmallCnn { conv_channels, .. } => conv_channels[2],
        }
    }
}

/// Trainable-scalar counts, split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub encoder: usize,
    pub classifier: usize,
    pub projection: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.encoder + self.classifier + self.projection
    }
}

/// Weights plus bias of a dense `inputs -> outputs` layer.
pub fn linear_param_count(inputs: usize, outputs: usize) -> usize {
    inputs * outputs + outputs
}

pub fn count_params(spec: &BackboneSpec) -> ParamCount {
    let layout = Layout::new(spec);
    let sum = |range: std::ops::Range<usize>| layout.slots[range].iter().map(|s| s.len()).sum();
    ParamCount {
        encoder: sum(0..layout.encoder_slots),
        classifier: sum(layout.classifier..layout.classifier + 2),
        projection: sum(layout.projection..layout.projection + 4),
    }
}

/// A weight matrix or bias vector inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Position of every tensor in the flat parameter vector.
///
/// Order: encoder layers as (weight, bias) pairs, classifier (weight, bias),
/// projection (w1, b1, w2, b2). Weights are stored `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub slots: Vec<Slot>,
    pub encoder_slots: usize,
    pub classifier: usize,
    pub projection: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(spec: &BackboneSpec) -> Self {
        let mut shapes = Vec::new();
        match &spec.kind {
            BackboneKind::Mlp { input_dim, hidden } => {
                let mut prev = *input_dim;
                for &w in hidden {
                    shapes.push((w, prev));
                    shapes.push((w, 1));
                    prev = w;
                }
            }
            BackboneKind::SmallCnn {
                channels,
                conv_channels,
                ..
            } => {
                let mut prev = *channels;
                for &c in conv_channels {
                    shapes.push((c, prev * 9));
                    shapes.push((c, 1));
                    prev = c;
                }
            }
        }
        let encoder_slots = shapes.len();
        let h = spec.representation_dim();
        let classifier = shapes.len();
        shapes.push((spec.num_classes, h));
        shapes.push((spec.num_classes, 1));
        let projection = shapes.len();
        shapes.push((h, h));
        shapes.push((h, 1));
        shapes.push((spec.projection_dim, h));
        shapes.push((spec.projection_dim, 1));

        let mut offset = 0;
        let slots = shapes
            .into_iter()
            .map(|(rows, cols)| {
                let slot = Slot { offset, rows, cols };
                offset += rows * cols;
                slot
            })
            .collect();
        Self {
            slots,
            encoder_slots,
            classifier,
            projection,
            total: offset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_count() {
        assert_eq!(linear_param_count(2, 3), 9);
    }

    #[test]
    fn empty_hidden_stack_classifier_is_input_by_classes() {
        let spec = BackboneSpec::mlp(6, vec![], 4, 3).unwrap();
        let count = count_params(&spec);
        assert_eq!(count.encoder, 0);
        assert_eq!(count.classifier, 6 * 3 + 3);
        assert_eq!(count.projection, linear_param_count(6, 6) + linear_param_count(6, 4));
    }

    #[test]
    fn doubling_width_quadruples_hidden_to_hidden_weights() {
        let hidden_to_hidden = |w: usize| {
            let spec = BackboneSpec::mlp(2, vec![w, w], 2, 2).unwrap();
            let layout = Layout::new(&spec);
            layout.slots[2].len()
        };
        assert_eq!(hidden_to_hidden(64), 64 * 64);
        assert_eq!(hidden_to_hidden(128), 4 * hidden_to_hidden(64));
    }

    #[test]
    fn total_matches_layout() {
        let spec = BackboneSpec::mlp(2, vec![64, 64], 16, 4).unwrap();
        let expected = linear_param_count(2, 64)
            + linear_param_count(64, 64)
            + linear_param_count(64, 4)
            + linear_param_count(64, 64)
            + linear_param_count(64, 16);
        assert_eq!(count_params(&spec).total(), expected);
        assert_eq!(Layout::new(&spec).total, expected);

        let cnn = BackboneSpec::small_cnn(3, 32, 32, [16, 32, 64], 16, 10).unwrap();
        let expected = linear_param_count(27, 16)
            + linear_param_count(144, 32)
            + linear_param_count(288, 64)
            + linear_param_count(64, 10)
            + linear_param_count(64, 64)
            + linear_param_count(64, 16);
        assert_eq!(count_params(&cnn).total(), expected);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(BackboneSpec::mlp(2, vec![64], 0, 4).is_err());
        assert!(BackboneSpec::mlp(2, vec![64], 1, 4).is_err());
        assert!(BackboneSpec::mlp(2, vec![8], 16, 4).is_err());
        assert!(BackboneSpec::mlp(2, vec![64], 16, 1).is_err());
        assert!(BackboneSpec::small_cnn(3, 30, 32, [8, 8, 8], 4, 10).is_err());
        assert!(BackboneSpec::mlp(2, vec![64], 16, 4).unwrap().with_dropout(1.0).is_err());
    }
}
