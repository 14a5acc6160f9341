//! Checkpoints as safetensors: every registered variable, optional optimizer
//! moments, and a JSON metadata block with the run configuration.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FusionVpr;
use crate::training::{LogRecord, Optimizer, OptimizerMeta, TrainConfig};

pub const FORMAT: &str = "fevpr-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// `(parameter name, first moment, second moment)`.
pub type Moments = Vec<(String, Tensor, Tensor)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub epoch: usize,
    pub iteration: usize,
    pub history: Vec<LogRecord>,
    pub optimizer: Option<OptimizerMeta>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: FusionVpr,
    pub moments: Moments,
    /// See [`content_id`].
    pub id: String,
}

pub fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// FNV-1a over the parameter bytes and run metadata. The safetensors
/// header orders its metadata map arbitrarily, so file bytes are not used.
pub fn content_id(model: &FusionVpr, meta_json: &str) -> Result<String> {
    let mut buf = Vec::new();
    for e in model.store.entries().iter() {
        buf.extend(e.name.as_bytes());
        buf.extend(raw(e.var.as_tensor())?.2);
    }
    buf.extend(meta_json.as_bytes());
    Ok(fnv1a(&buf))
}

fn raw(t: &Tensor) -> Result<(StDtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            StDtype::F32,
            shape,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        DType::F64 => (
            StDtype::F64,
            shape,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let bytes = view.data();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t)
}

/// Serialized file and its [`content_id`].
pub fn checkpoint_bytes(
    model: &FusionVpr,
    optimizer: Option<&Optimizer>,
    meta: &CheckpointMeta,
) -> Result<(Vec<u8>, String)> {
    let mut meta = meta.clone();
    meta.config.model = model.config.clone();
    let mut tensors: Vec<(String, (StDtype, Vec<usize>, Vec<u8>))> = Vec::new();
    for e in model.store.entries().iter() {
        tensors.push((format!("param.{}", e.name), raw(e.var.as_tensor())?));
    }
    if let Some(opt) = optimizer {
        meta.optimizer = Some(opt.meta());
        for (name, m, v) in opt.moments() {
            tensors.push((format!("opt.m.{name}"), raw(&m)?));
            tensors.push((format!("opt.v.{name}"), raw(&v)?));
        }
    }
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(n, (d, s, b))| {
            TensorView::new(*d, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let dtype = match model.dtype() {
        DType::F64 => "f64",
        _ => "f32",
    };
    let meta_json = serde_json::to_string(&meta)?;
    let id = content_id(model, &meta_json)?;
    let info: HashMap<String, String> = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
        ("dtype".to_string(), dtype.to_string()),
        ("meta".to_string(), meta_json),
    ]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((bytes, id))
}

pub fn save_checkpoint(
    path: &Path,
    model: &FusionVpr,
    optimizer: Option<&Optimizer>,
    meta: &CheckpointMeta,
) -> Result<String> {
    let (bytes, id) = checkpoint_bytes(model, optimizer, meta)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(id)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing metadata block".into()))?;
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint("not a model checkpoint".into()));
    }
    let version: u32 = info
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let dtype = match info.get("dtype").map(String::as_str) {
        Some("f64") => DType::F64,
        Some("f32") => DType::F32,
        other => return Err(Error::Checkpoint(format!("unknown dtype {other:?}"))),
    };
    let meta_json = info
        .get("meta")
        .ok_or_else(|| Error::Checkpoint("missing run metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(meta_json)?;

    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let model = FusionVpr::new(meta.config.model.clone(), dtype, meta.config.seed)?;
    for e in model.store.entries().iter() {
        let view = st
            .tensor(&format!("param.{}", e.name))
            .map_err(|_| Error::Checkpoint(format!("missing parameter '{}'", e.name)))?;
        let t = from_view(&view)?;
        if t.dims() != e.var.dims() || t.dtype() != e.var.dtype() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' stored as {:?} {:?}, model expects {:?} {:?}",
                e.name,
                t.dims(),
                t.dtype(),
                e.var.dims(),
                e.var.dtype()
            )));
        }
        e.var.set(&t)?;
    }
    let mut moments = Vec::new();
    for e in model.store.trainable() {
        if let (Ok(m), Ok(v)) = (st.tensor(&format!("opt.m.{}", e.name)), st.tensor(&format!("opt.v.{}", e.name))) {
            moments.push((e.name.clone(), from_view(&m)?, from_view(&v)?));
        }
    }
    let id = content_id(&model, meta_json)?;
    Ok(Checkpoint { meta, model, moments, id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;
    use crate::nn::Mode;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model.width = 4;
        c.model.encoder_blocks = 1;
        c.model.stage2_blocks = 1;
        c.model.stage3_blocks = 1;
        c.model.clusters = 2;
        c.model.input_width = 32;
        c.model.input_height = 32;
        c.model.reduction = 2;
        c.model.ablation = Ablation::preset("full").unwrap();
        c
    }

    fn meta(c: &TrainConfig) -> CheckpointMeta {
        CheckpointMeta {
            config: c.clone(),
            epoch: 2,
            iteration: 17,
            history: vec![LogRecord {
                epoch: 1,
                batch: 10,
                loss: 0.25,
                smoothed_loss: 0.3,
                lr: 1e-4,
                recall_at_1: Some(0.5),
            }],
            optimizer: None,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for precision in [crate::training::Precision::F32, crate::training::Precision::F64] {
            let mut cfg = tiny();
            cfg.precision = precision;
            let model = FusionVpr::new(cfg.model.clone(), precision.dtype(), 9).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.safetensors");
            let opt = Optimizer::new(&model, &cfg).unwrap();
            let id = save_checkpoint(&p, &model, Some(&opt), &meta(&cfg)).unwrap();
            let ck = load_checkpoint(&p).unwrap();
            assert_eq!(ck.id, id);
            assert_eq!(ck.meta.iteration, 17);
            assert_eq!(ck.meta.history, meta(&cfg).history);
            assert_eq!(ck.meta.optimizer.as_ref().unwrap().step, 0);
            assert_eq!(ck.moments.len(), model.store.trainable().len());
            assert_eq!(model.store.snapshot().unwrap(), ck.model.store.snapshot().unwrap());

            let x = Tensor::rand(0f32, 1.0, (1, 1, 32, 32), &Device::Cpu)
                .unwrap()
                .to_dtype(precision.dtype())
                .unwrap();
            let e = Tensor::cat(&[&x, &x], 1).unwrap();
            let a = model.forward(&x, &e, Mode::Eval).unwrap().descriptor;
            let b = ck.model.forward(&x, &e, Mode::Eval).unwrap().descriptor;
            let a: Vec<f64> = a.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            let b: Vec<f64> = b.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_foreign_and_corrupt_files() {
        assert!(parse_checkpoint(b"garbage").is_err());
        let t = [1.0f32, 2.0];
        let bytes: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
        let v = TensorView::new(StDtype::F32, vec![2], &bytes).unwrap();
        let foreign = safetensors::serialize([("x", v)], None).unwrap();
        assert!(matches!(parse_checkpoint(&foreign), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn fnv_known_values() {
        assert_eq!(fnv1a(b""), "cbf29ce484222325");
        assert_eq!(fnv1a(b"a"), "af63dc4c8601ec8c");
    }
}
