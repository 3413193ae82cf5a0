use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Sgd, TrainConfig, TrainState};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::memory::LabeledMemoryBuffer;
use crate::model::BackboneSpec;
use crate::propagation::AlignmentState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SIMMATCH";

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    spec: BackboneSpec,
    dataset_id: String,
    step: u64,
}

/// A resumable snapshot of a run.
///
/// Layout: magic `SIMMATCH`, version (u32), JSON header (config, backbone,
/// dataset id, step), then student, teacher (flagged), EMA and velocity
/// vectors, the buffer blob and the alignment window. Integers and floats
/// are little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: BackboneSpec,
    pub dataset_id: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            spec: self.spec.clone(),
            dataset_id: self.dataset_id.clone(),
            step: self.state.step,
        };
        let s = &self.state;
        let mut w = Writer::default();
        w.raw(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&serde_json::to_vec(&header)?);
        w.f64_vec(&s.student);
        match &s.teacher {
            Some(t) => {
                w.u32(1);
                w.f64_vec(t);
            }
            None => w.u32(0),
        }
        w.f64_vec(&s.ema);
        w.f64_vec(&s.optimizer.velocity);
        w.bytes(&s.buffer.to_bytes());
        w.u64(s.align.window_len() as u64);
        for entry in s.align.window() {
            w.f64_vec(entry);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(r.bytes()?)?;
        let student = r.f64_vec()?;
        let teacher = match r.u32()? {
            0 => None,
            1 => Some(r.f64_vec()?),
            other => return Err(Error::Checkpoint(format!("bad teacher flag {other}"))),
        };
        let ema = r.f64_vec()?;
        let velocity = r.f64_vec()?;
        let buffer = LabeledMemoryBuffer::from_bytes(r.bytes()?)?;
        let window_len = r.u64()? as usize;
        let window = (0..window_len).map(|_| r.f64_vec()).collect::<Result<Vec<_>>>()?;
        r.finish()?;

        let cfg = &header.config;
        let n = student.len();
        if ema.len() != n || velocity.len() != n || teacher.as_ref().is_some_and(|t| t.len() != n) {
            return Err(Error::Checkpoint("parameter vectors differ in length".into()));
        }
        let align = AlignmentState::from_window(buffer.num_classes(), cfg.da_window, window)?;
        let mut optimizer = Sgd::new(n, cfg.sgd_momentum, cfg.nesterov, cfg.weight_decay);
        optimizer.velocity = velocity;
        Ok(Self {
            config: header.config,
            spec: header.spec,
            dataset_id: header.dataset_id,
            state: TrainState {
                step: header.step,
                student,
                teacher,
                ema,
                optimizer,
                buffer,
                align,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
