use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "medref-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors with gradient accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: names are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let [r, c] = value.shape();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: Tensor::zeros(r, c),
        });
        id
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        self.add(name, Tensor::new(rows, cols, data).expect("sized"))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_checkpoint(&self) -> ParamCheckpoint {
        ParamCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        StoredTensor {
                            shape: p.value.shape(),
                            values: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrites values by name. Every parameter must be present with a matching shape.
    pub fn load_checkpoint(&mut self, ck: &ParamCheckpoint) -> Result<(), NumericsError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.params.len() != self.params.len() {
            return Err(NumericsError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                ck.params.len(),
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let stored = ck
                .params
                .get(&p.name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if stored.shape != p.value.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "parameter {}: shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    stored.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(stored.shape[0], stored.shape[1], stored.values.clone())
                .map_err(|e| NumericsError::Checkpoint(format!("parameter {}: {e}", p.name)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

/// Versioned JSON parameter dump: name -> shape + values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub params: BTreeMap<String, StoredTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        s.normal("w", 3, 4, 4, &mut rng);
        s.zeros("b", 1, 4);
        let json = serde_json::to_string(&s.to_checkpoint()).unwrap();
        let ck: ParamCheckpoint = serde_json::from_str(&json).unwrap();
        let mut t = s.clone();
        t.iter_mut().for_each(|p| p.value.data_mut().fill(9.0));
        t.load_checkpoint(&ck).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn checkpoint_shape_mismatch() {
        let mut s = ParamStore::new();
        s.zeros("w", 2, 2);
        let mut ck = s.to_checkpoint();
        ck.params.get_mut("w").unwrap().shape = [4, 1];
        assert!(s.load_checkpoint(&ck).is_err());
        ck.version = 99;
        assert!(s.load_checkpoint(&ck).is_err());
    }
}
