use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AuxHead, Layer, LayerSpec, Mlp, Parameterized};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numerics::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk model: layer specs, parameters flattened layer by layer (weights
/// row-major then biases), and the fingerprint of the config that produced it.
///
/// Stored as JSON; `serde_json`'s `float_roundtrip` keeps every `f64` bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub role: String,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    pub config_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_head: Option<AuxHead>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_depth: Option<usize>,
}

impl Checkpoint {
    pub fn from_model(role: &str, net: &Mlp, config_fingerprint: &str) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            role: role.to_string(),
            layers: net.specs(),
            params: net.param_slices().concat(),
            config_fingerprint: config_fingerprint.to_string(),
            aux_head: None,
            exit_depth: None,
        }
    }

    pub fn to_model(&self) -> Result<Mlp> {
        let expected: usize = self
            .layers
            .iter()
            .map(|s| s.in_dim * s.out_dim + s.out_dim)
            .sum();
        if expected != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "layer specs need {expected} parameters, file has {}",
                self.params.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let nw = spec.in_dim * spec.out_dim;
            let weight = Matrix::from_vec(
                spec.out_dim,
                spec.in_dim,
                self.params[offset..offset + nw].to_vec(),
            )?;
            offset += nw;
            let bias = self.params[offset..offset + spec.out_dim].to_vec();
            offset += spec.out_dim;
            layers.push(Layer {
                spec: *spec,
                weight,
                bias,
            });
        }
        Mlp::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;
    use crate::numerics::RngStream;

    #[test]
    fn save_load_is_bit_exact() {
        let mut rng = RngStream::new(31);
        let net = Mlp::new(7, &[9, 5], 3, Activation::Relu, &mut rng).unwrap();
        let mut ck = Checkpoint::from_model("student", &net, "abc");
        ck.aux_head = Some(AuxHead::random(3, 9, &mut rng));
        ck.exit_depth = Some(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let net2 = back.to_model().unwrap();
        let bits = |m: &Mlp| -> Vec<u64> {
            m.param_slices().concat().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&net), bits(&net2));
    }

    #[test]
    fn truncated_parameters_are_rejected() {
        let mut rng = RngStream::new(1);
        let net = Mlp::new(2, &[2], 2, Activation::Relu, &mut rng).unwrap();
        let mut ck = Checkpoint::from_model("t", &net, "");
        ck.params.pop();
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
