//! Versioned JSON checkpoints. Tensor values are decimal strings with 17
//! significant digits, which round-trips every finite `f64` bit-exactly, and
//! tensor maps are ordered so serialization is byte-stable across runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserArch, DenoiserParams, DenseLayer, LoraAdapter, LoraPair, LAYER_NAMES};
use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub values: Vec<String>,
}

impl TensorJson {
    fn from_mat(m: &Mat) -> Self {
        TensorJson {
            shape: vec![m.rows(), m.cols()],
            values: m.data().iter().map(|v| format_value(*v)).collect(),
        }
    }

    fn from_vec(v: &[f64]) -> Self {
        TensorJson { shape: vec![v.len()], values: v.iter().map(|x| format_value(*x)).collect() }
    }

    fn to_mat(&self, name: &str) -> Result<Mat> {
        if self.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("tensor {name} is not a matrix")));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if self.values.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: {} values for shape {rows}x{cols}",
                self.values.len()
            )));
        }
        let data = self
            .values
            .iter()
            .map(|s| parse_value(s, name))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Mat::from_vec(rows, cols, data))
    }

    fn to_vector(&self, name: &str) -> Result<Vec<f64>> {
        if self.shape.len() != 1 || self.values.len() != self.shape[0] {
            return Err(Error::Checkpoint(format!("tensor {name} is not a vector")));
        }
        self.values.iter().map(|s| parse_value(s, name)).collect()
    }
}

fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_value(s: &str, name: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Checkpoint(format!("tensor {name}: bad value `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::Checkpoint(format!("tensor {name}: non-finite value `{s}`")));
    }
    Ok(v)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub arch: DenoiserArch,
    pub tensors: BTreeMap<String, TensorJson>,
}

impl ModelCheckpoint {
    pub fn from_params(params: &DenoiserParams) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, layer) in LAYER_NAMES.iter().zip(&params.layers) {
            tensors.insert(format!("{name}.weight"), TensorJson::from_mat(&layer.weight));
            tensors.insert(format!("{name}.bias"), TensorJson::from_vec(&layer.bias));
        }
        tensors.insert("concept_embedding".into(), TensorJson::from_mat(&params.concept_embed));
        ModelCheckpoint { version: CHECKPOINT_VERSION, arch: params.arch, tensors }
    }

    pub fn into_params(self) -> Result<DenoiserParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        self.arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let fetch = |name: &str| -> Result<&TensorJson> {
            self.tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let shapes = self.arch.layer_shapes();
        let mut layers = Vec::with_capacity(LAYER_NAMES.len());
        for (i, name) in LAYER_NAMES.iter().enumerate() {
            let weight = fetch(&format!("{name}.weight"))?.to_mat(name)?;
            let bias = fetch(&format!("{name}.bias"))?.to_vector(name)?;
            if weight.shape() != shapes[i] || bias.len() != shapes[i].0 {
                return Err(Error::Checkpoint(format!("tensor {name} has the wrong shape")));
            }
            layers.push(DenseLayer { weight, bias });
        }
        let concept_embed = fetch("concept_embedding")?.to_mat("concept_embedding")?;
        if concept_embed.shape() != (self.arch.num_concepts + 1, self.arch.concept_embed_dim) {
            return Err(Error::Checkpoint("concept_embedding has the wrong shape".into()));
        }
        let layers: [DenseLayer; 4] =
            layers.try_into().expect("exactly four layers were collected");
        Ok(DenoiserParams { arch: self.arch, layers, concept_embed })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterCheckpoint {
    pub version: u32,
    pub kind: String,
    pub rank: usize,
    pub scale: f64,
    pub tensors: BTreeMap<String, TensorJson>,
}

impl AdapterCheckpoint {
    pub fn from_adapter(adapter: &LoraAdapter) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, pair) in LAYER_NAMES.iter().zip(&adapter.pairs) {
            tensors.insert(format!("{name}.down"), TensorJson::from_mat(&pair.down));
            tensors.insert(format!("{name}.up"), TensorJson::from_mat(&pair.up));
        }
        AdapterCheckpoint {
            version: CHECKPOINT_VERSION,
            kind: "lora".into(),
            rank: adapter.rank,
            scale: adapter.scale,
            tensors,
        }
    }

    pub fn into_adapter(self) -> Result<LoraAdapter> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.kind != "lora" {
            return Err(Error::Checkpoint(format!("unsupported adapter kind `{}`", self.kind)));
        }
        let mut pairs = Vec::with_capacity(LAYER_NAMES.len());
        for name in LAYER_NAMES {
            let down = self
                .tensors
                .get(&format!("{name}.down"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}.down")))?
                .to_mat(name)?;
            let up = self
                .tensors
                .get(&format!("{name}.up"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}.up")))?
                .to_mat(name)?;
            if up.cols() != down.rows() {
                return Err(Error::Checkpoint(format!("tensor pair {name} ranks disagree")));
            }
            pairs.push(LoraPair { down, up });
        }
        let pairs: [LoraPair; 4] = pairs.try_into().expect("exactly four pairs were collected");
        Ok(LoraAdapter { rank: self.rank, scale: self.scale, pairs })
    }
}

pub fn model_to_json(params: &DenoiserParams) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelCheckpoint::from_params(params))?)
}

pub fn save_model(params: &DenoiserParams, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(params)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DenoiserParams> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: ModelCheckpoint = serde_json::from_str(&text)?;
    ckpt.into_params()
}

pub fn adapter_to_json(adapter: &LoraAdapter) -> Result<String> {
    Ok(serde_json::to_string_pretty(&AdapterCheckpoint::from_adapter(adapter))?)
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    std::fs::write(path, adapter_to_json(adapter)?)?;
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: AdapterCheckpoint = serde_json::from_str(&text)?;
    ckpt.into_adapter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_adapter, init_denoiser, DenoiserArch};

    fn arch() -> DenoiserArch {
        DenoiserArch { dim: 2, hidden: 16, time_embed_dim: 8, concept_embed_dim: 4, num_concepts: 3 }
    }

    fn bits(params: &DenoiserParams) -> Vec<u64> {
        let mut out = Vec::new();
        for layer in &params.layers {
            out.extend(layer.weight.data().iter().map(|v| v.to_bits()));
            out.extend(layer.bias.iter().map(|v| v.to_bits()));
        }
        out.extend(params.concept_embed.data().iter().map(|v| v.to_bits()));
        out
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let params = init_denoiser(arch(), 11).unwrap();
        let json = model_to_json(&params).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = back.into_params().unwrap();
        assert_eq!(bits(&params), bits(&restored));
        assert_eq!(params.arch, restored.arch);
    }

    #[test]
    fn adapter_roundtrip_is_bit_exact() {
        let params = init_denoiser(arch(), 11).unwrap();
        let adapter = init_adapter(&params, 4, 4.0, 3).unwrap();
        let json = adapter_to_json(&adapter).unwrap();
        let back: AdapterCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = back.into_adapter().unwrap();
        assert_eq!(adapter, restored);
    }

    #[test]
    fn serialization_is_byte_stable() {
        let params = init_denoiser(arch(), 11).unwrap();
        assert_eq!(model_to_json(&params).unwrap(), model_to_json(&params).unwrap());
    }

    #[test]
    fn awkward_values_roundtrip() {
        for v in [0.1, -0.0, 1.0 / 3.0, 1e-300, -2.5e300, f64::MIN_POSITIVE] {
            let s = format_value(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "value {v} -> `{s}`");
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let params = init_denoiser(arch(), 11).unwrap();
        let mut ckpt = ModelCheckpoint::from_params(&params);
        ckpt.tensors.get_mut("input.bias").unwrap().values.pop();
        assert!(ckpt.into_params().is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let params = init_denoiser(arch(), 11).unwrap();
        save_model(&params, &path).unwrap();
        let restored = load_model(&path).unwrap();
        assert_eq!(bits(&params), bits(&restored));
    }
}
