//! Directory checkpoint: `manifest.json` plus a little-endian `weights.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{is_backbone_tensor, Model};
use super::params::ParamStore;
use super::{BackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::{lit, DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Shapes of the backbone tensors are checked against this.
    pub backbone: BackboneConfig,
    /// Present for checkpoints written by this crate; converted imports may omit it.
    #[serde(default)]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub manifest: Manifest,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Rebuilds the full model; requires a manifest with a model config.
    pub fn into_model(self) -> Result<Model<T>> {
        let config = self
            .manifest
            .config
            .ok_or_else(|| Error::invalid("checkpoint has no model config"))?;
        Model::from_parts(config, self.params)
    }
}

/// Expected shapes of the pretrained tensors for a backbone configuration.
pub fn backbone_shapes(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h) = (cfg.d_model, cfg.ffn_hidden);
    let mut out = vec![("wpe.weight".to_string(), vec![cfg.max_tokens, d])];
    for l in 0..cfg.num_layers {
        for (s, shape) in [
            ("ln_1.weight", vec![d]),
            ("ln_1.bias", vec![d]),
            ("attn.c_attn.weight", vec![d, 3 * d]),
            ("attn.c_attn.bias", vec![3 * d]),
            ("attn.c_proj.weight", vec![d, d]),
            ("attn.c_proj.bias", vec![d]),
            ("ln_2.weight", vec![d]),
            ("ln_2.bias", vec![d]),
            ("mlp.c_fc.weight", vec![d, h]),
            ("mlp.c_fc.bias", vec![h]),
            ("mlp.c_proj.weight", vec![h, d]),
            ("mlp.c_proj.bias", vec![d]),
        ] {
            out.push((format!("h.{l}.{s}"), shape));
        }
    }
    out.push(("ln_f.weight".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    out
}

/// Writes every parameter of `model` at its native precision.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<()> {
    write_checkpoint(
        &model.config().backbone,
        Some(model.config()),
        model.params(),
        dir,
    )
}

pub fn write_checkpoint<T: Scalar>(
    backbone: &BackboneConfig,
    config: Option<&ModelConfig>,
    params: &ParamStore<T>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(params.len());
    for p in params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE,
            offset: blob.len(),
            trainable: p.trainable,
        });
        for &v in p.value.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        backbone: backbone.clone(),
        config: config.cloned(),
        tensors,
    };
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
}

fn read_values<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    }
}

/// Reads and validates a checkpoint directory.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let wpath = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * e.dtype.size_bytes();
        if end > blob.len() {
            return Err(Error::CheckpointTruncated {
                name: e.name.clone(),
                needed: end,
                available: blob.len(),
            });
        }
        let data = read_values(&blob[e.offset..end], e.dtype);
        params.insert(
            e.name.clone(),
            Tensor::new(e.shape.clone(), data)?,
            e.trainable,
        );
    }

    let mut expected = backbone_shapes(&manifest.backbone);
    if let Some(cfg) = &manifest.config {
        if cfg.backbone != manifest.backbone {
            return Err(Error::invalid(
                "manifest backbone disagrees with model config",
            ));
        }
        let reference = Model::<T>::new(cfg.clone())?;
        expected = reference
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
    }
    for (name, shape) in expected {
        let got = params
            .get(&name)
            .ok_or_else(|| Error::CheckpointMissing(name.clone()))?;
        if got.shape() != shape.as_slice() {
            return Err(Error::CheckpointShape {
                name,
                found: got.shape().to_vec(),
                expected: shape,
            });
        }
    }
    if manifest.config.is_none() && !params.iter().any(|p| is_backbone_tensor(&p.name)) {
        return Err(Error::invalid("checkpoint contains no backbone tensors"));
    }
    Ok(Checkpoint { manifest, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;
    use crate::preprocessing::PatchConfig;
    use crate::tasks_heads::TaskSpec;

    fn config(d: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::small(3, d),
            patch: PatchConfig::new(16, 8, 96).unwrap(),
            channels: 1,
            task: TaskSpec::LongForecast { horizon: 24 },
            variant: Variant::Adapter,
            adapters: Default::default(),
            seed: 5,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let start = std::time::Instant::now();
        let m = Model::<f64>::new(config(64)).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back = load_checkpoint::<f64>(dir.path())
            .unwrap()
            .into_model()
            .unwrap();
        assert!(start.elapsed().as_secs_f64() < 1.0);
        assert_eq!(back.params().hash(), m.params().hash());
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            let (x, y): (Vec<u64>, Vec<u64>) = (
                a.value.data().iter().map(|v| v.to_bits()).collect(),
                b.value.data().iter().map(|v| v.to_bits()).collect(),
            );
            assert_eq!(x, y);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f64>::new(config(128)).unwrap();
        let small = config(64);
        write_checkpoint(&small.backbone, None, m.params(), dir.path()).unwrap();
        let err = load_checkpoint::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::CheckpointShape { .. }), "{err}");
    }

    #[test]
    fn version_and_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(config(32)).unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let wpath = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&wpath).unwrap();
        fs::write(&wpath, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(Error::CheckpointTruncated { .. })
        ));
        fs::write(&wpath, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));
    }

    #[test]
    fn f32_blob_loads_into_f64_model() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(config(32)).unwrap();
        write_checkpoint(&m.config().backbone, None, m.params(), dir.path()).unwrap();
        let ck = load_checkpoint::<f64>(dir.path()).unwrap();
        let mut cfg = config(32);
        cfg.seed = 99;
        let target = Model::<f64>::from_pretrained(cfg, &ck).unwrap();
        let a = m.params().get("h.0.attn.c_attn.weight").unwrap();
        let b = target.params().get("h.0.attn.c_attn.weight").unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(&x, &y)| x as f64 == y));
    }
}
