//! JSON parameter checkpoints.
//!
//! ```json
//! {"format": "latentflow-params/1",
//!  "params": [{"name": "f.0.weight", "shape": [64, 2], "values": [...]}, ...]}
//! ```
//!
//! Values are written as shortest round-trip decimals and parsed with
//! correct rounding, so every finite `f64` survives a save/load unchanged.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameterized, Tensor};

pub const FORMAT: &str = "latentflow-params/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture<M: Parameterized + ?Sized>(model: &M) -> Self {
        let params = model
            .params()
            .into_iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.to_string(),
            params,
        }
    }

    /// Writes the stored values into `model`, matching by name. Every model
    /// parameter must be present with the same shape.
    pub fn restore<M: Parameterized + ?Sized>(&self, model: &mut M) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", self.format)));
        }
        for p in model.params_mut() {
            let rec = self
                .params
                .iter()
                .find(|r| r.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if rec.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    rec.shape
                )));
            }
            p.value = Tensor::new(rec.shape.clone(), rec.values.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        for rec in &self.params {
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{}`", rec.name)));
            }
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp, ParamIds};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn values_round_trip_bit_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let ckpt = Checkpoint {
                format: FORMAT.into(),
                params: vec![ParamRecord { name: "p".into(), shape: vec![values.len()], values: values.clone() }],
            };
            let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
            let bits: Vec<u64> = back.params[0].values.iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }

    #[test]
    fn restore_into_fresh_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::new("m", &[3, 5, 2], Activation::Tanh, true, &mut ParamIds::new(), &mut rng).unwrap();
        let mut b = Mlp::new("m", &[3, 5, 2], Activation::Tanh, true, &mut ParamIds::new(), &mut rng).unwrap();
        assert_ne!(a, b);
        let json = Checkpoint::capture(&a).to_json().unwrap();
        Checkpoint::from_json(&json).unwrap().restore(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mlp::new("m", &[3, 5, 2], Activation::Tanh, false, &mut ParamIds::new(), &mut rng).unwrap();
        let mut b = Mlp::new("m", &[3, 4, 2], Activation::Tanh, false, &mut ParamIds::new(), &mut rng).unwrap();
        assert!(Checkpoint::capture(&a).restore(&mut b).is_err());
    }
}
