use serde::{Deserialize, Serialize};

use super::graph::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named parameter with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

/// Owns every parameter of a model stack. Names are unique and stable so
/// checkpoints can address parameters by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Matrix::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_trainable(&mut self, ids: &[ParamId], trainable: bool) {
        for id in ids {
            self.params[id.0].trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Copies values from `other` for every parameter whose name has the
    /// given prefix in `other` and `target_prefix` here.
    pub fn copy_prefixed(
        &mut self,
        other: &ParamStore,
        source_prefix: &str,
        target_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for p in &other.params {
            let Some(rest) = p.name.strip_prefix(source_prefix) else {
                continue;
            };
            let name = format!("{target_prefix}{rest}");
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
            let dst = &mut self.params[id.0];
            if dst.value.dim() != p.value.dim() {
                return Err(Error::Dimension(format!(
                    "{name}: {:?} vs {:?}",
                    dst.value.dim(),
                    p.value.dim()
                )));
            }
            dst.value.assign(&p.value);
            copied += 1;
        }
        Ok(copied)
    }

    pub fn values_equal(&self, other: &ParamStore, ids: &[ParamId]) -> bool {
        ids.iter().all(|id| {
            let (a, b) = (&self.params[id.0].value, &other.params[id.0].value);
            a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}
