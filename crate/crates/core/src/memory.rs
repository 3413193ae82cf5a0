//! Labeled memory buffer (`Q_f`, `Q_l`) and the two momentum update rules.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_NORM_TOL: f64 = 1e-5;
const BUFFER_MAGIC: &[u8; 4] = b"SMQB";
const BUFFER_VERSION: u32 = 1;

/// Largest buffer for which the automatic mode picks temporal ensembling.
pub const TEMPORAL_MAX_K: usize = 10_000;

/// How buffer embeddings are kept stable over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// One shared network; buffer rows are momentum-smoothed in place.
    TemporalEnsemble,
    /// A parameter-EMA teacher produces targets and buffer rows, which are
    /// written directly.
    StudentTeacher,
}

impl BufferMode {
    pub fn for_buffer_size(k: usize) -> Self {
        if k <= TEMPORAL_MAX_K {
            BufferMode::TemporalEnsemble
        } else {
            BufferMode::StudentTeacher
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BufferMode::TemporalEnsemble => "temporal_ensemble",
            BufferMode::StudentTeacher => "student_teacher",
        }
    }
}

impl std::str::FromStr for BufferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal_ensemble" | "temporal" => Ok(BufferMode::TemporalEnsemble),
            "student_teacher" | "teacher" => Ok(BufferMode::StudentTeacher),
            other => Err(Error::config(format!("unknown buffer mode `{other}`"))),
        }
    }
}

/// Momentum and mode, fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaSchedule {
    pub momentum: f64,
    pub mode: BufferMode,
}

impl EmaSchedule {
    pub fn new(momentum: f64, mode: BufferMode) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(Self { momentum, mode })
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!("momentum must lie in [0, 1], got {m}")));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One row per labeled sample, in buffer-index order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMemoryBuffer {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl LabeledMemoryBuffer {
    /// Builds a buffer from raw embeddings (row-major `K x D`), normalizing
    /// every row. Every class in `0..num_classes` must appear in `labels`.
    pub fn from_embeddings(
        embeddings: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("labeled set is empty"));
        }
        if dim == 0 || embeddings.len() != labels.len() * dim {
            return Err(Error::input(format!(
                "{} embedding values for {} labels of width {dim}",
                embeddings.len(),
                labels.len()
            )));
        }
        let mut counts = vec![0usize; num_classes];
        for &c in &labels {
            if c >= num_classes {
                return Err(Error::input(format!("label {c} outside [0, {num_classes})")));
            }
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("class {c} has no labeled sample")));
        }
        let mut features = embeddings;
        for row in features.chunks_exact_mut(dim) {
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::input("labeled embedding has zero or non-finite norm"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Row-major `K x D` feature matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Features as a `K x D` matrix view.
    pub fn features_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.features).expect("K x D")
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &c in &self.labels {
            counts[c] += 1;
        }
        counts
    }

    fn check_update(&self, indices: &[usize], embeddings: &[f64]) -> Result<()> {
        if embeddings.len() != indices.len() * self.dim {
            return Err(Error::input(format!(
                "{} embedding values for {} indices of width {}",
                embeddings.len(),
                indices.len(),
                self.dim
            )));
        }
        let mut seen = vec![false; self.len()];
        for &j in indices {
            if j >= self.len() {
                return Err(Error::input(format!(
                    "buffer index {j} out of range for K={}",
                    self.len()
                )));
            }
            if std::mem::replace(&mut seen[j], true) {
                return Err(Error::input(format!("buffer index {j} repeated in one update")));
            }
        }
        for row in embeddings.chunks_exact(self.dim) {
            if (norm(row) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::input("buffer update embeddings must be unit-norm"));
            }
        }
        Ok(())
    }

    /// `row_j <- Normalize(m * row_j + (1 - m) * z_j)` for each listed index.
    pub fn temporal_update(&mut self, indices: &[usize], embeddings: &[f64], m: f64) -> Result<()> {
        check_momentum(m)?;
        self.check_update(indices, embeddings)?;
        if m == 1.0 {
            // stored rows are already unit-norm; renormalizing would only add rounding
            return Ok(());
        }
        for (&j, z) in indices.iter().zip(embeddings.chunks_exact(self.dim)) {
            let dim = self.dim;
            let row = &mut self.features[j * dim..(j + 1) * dim];
            for (r, v) in row.iter_mut().zip(z) {
                *r = m * *r + (1.0 - m) * v;
            }
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                // antipodal rows at m = 0.5 cancel; keep the fresh embedding
                row.copy_from_slice(z);
            }
        }
        Ok(())
    }

    /// Overwrites the listed rows with the given unit-norm embeddings.
    pub fn direct_write(&mut self, indices: &[usize], embeddings: &[f64]) -> Result<()> {
        self.check_update(indices, embeddings)?;
        for (&j, z) in indices.iter().zip(embeddings.chunks_exact(self.dim)) {
            self.features[j * self.dim..(j + 1) * self.dim].copy_from_slice(z);
        }
        Ok(())
    }

    /// Dispatches to [`Self::temporal_update`] or [`Self::direct_write`].
    pub fn update(&mut self, schedule: &EmaSchedule, indices: &[usize], embeddings: &[f64]) -> Result<()> {
        match schedule.mode {
            BufferMode::TemporalEnsemble => self.temporal_update(indices, embeddings, schedule.momentum),
            BufferMode::StudentTeacher => self.direct_write(indices, embeddings),
        }
    }

    /// Versioned little-endian blob: magic, version, K, D, L, row-major
    /// features as f64, labels as u32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.features.len() * 8 + self.labels.len() * 4);
        out.extend_from_slice(BUFFER_MAGIC);
        out.extend_from_slice(&BUFFER_VERSION.to_le_bytes());
        for n in [self.len(), self.dim, self.num_classes] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &c in &self.labels {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::codec::Reader::new(bytes);
        if r.take(4)? != BUFFER_MAGIC {
            return Err(Error::Checkpoint("buffer blob has the wrong magic".into()));
        }
        let version = r.u32()?;
        if version != BUFFER_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: BUFFER_VERSION,
            });
        }
        let k = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let num_classes = r.u64()? as usize;
        let features = (0..k * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let labels = (0..k)
            .map(|_| r.u32().map(|c| c as usize))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let buffer = Self {
            features,
            labels,
            dim,
            num_classes,
        };
        if buffer.labels.iter().any(|&c| c >= num_classes) {
            return Err(Error::Checkpoint("buffer label out of range".into()));
        }
        Ok(buffer)
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], m: f64) -> Result<()> {
    check_momentum(m)?;
    if teacher.len() != student.len() {
        return Err(Error::input(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}
