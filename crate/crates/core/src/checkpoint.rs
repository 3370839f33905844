//! Model checkpoints: architecture, stage, step count, and every parameter
//! with its momentum buffer and learning-rate multiplier.
//!
//! Values are stored as `f64` regardless of the model scalar, so both `f32`
//! and `f64` models round-trip bit-exactly.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::container::{self, Reader, Writer};
use crate::nets::{ArchConfig, IlluminantModel};
use crate::nn::{ParamStore, Parameter, Tensor};
use crate::scalar::Real;
use crate::training::StageId;

pub const SECTION: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub lr_mult: f32,
    pub value: Vec<f64>,
    pub momentum: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub stage: Option<StageId>,
    pub step: u64,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &IlluminantModel<T>, step: u64) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| StoredParam {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                lr_mult: p.lr_mult,
                value: p.value.data().iter().map(|v| v.as_f64()).collect(),
                momentum: p.momentum_buf.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Checkpoint {
            arch: model.arch().clone(),
            stage: model.stage,
            step,
            params,
        }
    }

    /// Rebuilds the model graph from the stored architecture.
    pub fn to_model<T: Real>(&self) -> Result<IlluminantModel<T>> {
        let mut store = ParamStore::new();
        for sp in &self.params {
            let mut p = Parameter::new(
                sp.name.clone(),
                Tensor::from_vec(&sp.shape, sp.value.iter().map(|&v| T::lit(v)).collect())?,
            );
            p.momentum_buf = Tensor::from_vec(&sp.shape, sp.momentum.iter().map(|&v| T::lit(v)).collect())?;
            p.lr_mult = sp.lr_mult;
            store.insert(p)?;
        }
        IlluminantModel::from_store(&self.arch, store, self.stage)
    }

    pub fn param(&self, name: &str) -> Option<&StoredParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.string(&self.arch.to_text());
        w.u8(self.stage.map_or(0, |s| s.code()));
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.string(&p.name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u64(d as u64);
            }
            w.f32(p.lr_mult);
        }
        for p in &self.params {
            p.value.iter().for_each(|&v| w.f64(v));
            p.momentum.iter().for_each(|&v| w.f64(v));
        }
        container::wrap(SECTION, &w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let payload = container::unwrap(bytes, SECTION)?;
        let mut r = Reader::new(payload, "checkpoint");
        let arch = ArchConfig::from_text(&r.string()?)?;
        let code = r.u8()?;
        let stage = match code {
            0 => None,
            c => Some(
                StageId::from_code(c)
                    .ok_or_else(|| Error::format("checkpoint", format!("unknown stage code {c}")))?,
            ),
        };
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let lr_mult = r.f32()?;
            params.push(StoredParam {
                name,
                shape,
                lr_mult,
                value: Vec::new(),
                momentum: Vec::new(),
            });
        }
        for p in &mut params {
            let len: usize = p.shape.iter().product();
            p.value = (0..len).map(|_| r.f64()).collect::<Result<_>>()?;
            p.momentum = (0..len).map(|_| r.f64()).collect::<Result<_>>()?;
        }
        if !r.is_done() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            arch,
            stage,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
