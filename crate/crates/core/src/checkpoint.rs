//! Versioned checkpoint container.
//!
//! A checkpoint is a safetensors file. Parameter arrays are stored under
//! their registry names and a JSON [`Header`] sits in the file metadata
//! under the key `fadersynth`. One file can carry an auto-encoder, a
//! vocoder, or both (a joint pipeline).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conditioning, ModelConfig, WaeModel};
use crate::objectives::Variant;
use crate::vocoder::{Mcnn, McnnConfig};

pub const FORMAT_KEY: &str = "fadersynth";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub config_hash: String,
    pub n_style: usize,
    pub conditioning: Conditioning,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    pub style_vocab: Vec<String>,
    /// Mel magnitude reference of the log scaling.
    pub ref_max: f64,
    /// Octave classes present in the training corpus.
    pub octaves: Vec<u8>,
    pub variant: Option<Variant>,
    pub model: Option<ModelMeta>,
    pub mcnn: Option<McnnConfig>,
    /// True once decoder and vocoder were optimized jointly.
    pub finetuned: bool,
}

/// Corpus-side constants every checkpoint carries.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub style_vocab: Vec<String>,
    pub ref_max: f64,
    pub octaves: Vec<u8>,
}

pub struct Checkpoint {
    pub header: Header,
    pub model: Option<WaeModel>,
    pub mcnn: Option<Mcnn>,
}

impl Checkpoint {
    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            style_vocab: self.header.style_vocab.clone(),
            ref_max: self.header.ref_max,
            octaves: self.header.octaves.clone(),
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        self.header.variant
    }

    pub fn into_model(self) -> Result<WaeModel> {
        self.model.ok_or_else(|| Error::Checkpoint("no auto-encoder in checkpoint".into()))
    }
}

fn dtype_name(dt: DType) -> Result<&'static str> {
    match dt {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

fn bytes_of(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_of(view: &TensorView<'_>) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    };
    Ok(t)
}

/// Writes any combination of auto-encoder and vocoder with their metadata.
pub fn save(
    path: impl AsRef<Path>,
    pre: &Preprocessing,
    variant: Option<Variant>,
    model: Option<&WaeModel>,
    mcnn: Option<&Mcnn>,
    finetuned: bool,
) -> Result<()> {
    let path = path.as_ref();
    let dtype = match (model, mcnn) {
        (Some(m), Some(v)) if m.dtype() != v.store().dtype() => {
            return Err(Error::Checkpoint("auto-encoder and vocoder dtypes differ".into()))
        }
        (Some(m), _) => m.dtype(),
        (None, Some(v)) => v.store().dtype(),
        (None, None) => return Err(Error::Checkpoint("nothing to save".into())),
    };
    if let Some(m) = model {
        if m.n_style() != pre.style_vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} styles, vocabulary {}",
                m.n_style(),
                pre.style_vocab.len()
            )));
        }
    }
    let header = Header {
        version: VERSION,
        dtype: dtype_name(dtype)?.into(),
        style_vocab: pre.style_vocab.clone(),
        ref_max: pre.ref_max,
        octaves: pre.octaves.clone(),
        variant,
        model: model.map(|m| ModelMeta {
            config: m.config().clone(),
            config_hash: m.config().hash(),
            n_style: m.n_style(),
            conditioning: m.conditioning(),
            seed: m.seed(),
        }),
        mcnn: mcnn.map(|v| v.config().clone()),
        finetuned,
    };
    let mut snaps = Vec::new();
    if let Some(m) = model {
        snaps.extend(m.store().snapshot()?);
    }
    if let Some(v) = mcnn {
        snaps.extend(v.store().snapshot()?);
    }
    write_tensors(path, FORMAT_KEY, &serde_json::to_string(&header)?, &snaps)
}

/// Writes named tensors with one JSON metadata entry under `key`.
pub(crate) fn write_tensors(path: &Path, key: &str, json: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let arrays = tensors
        .iter()
        .map(|(name, t)| {
            let (dt, bytes) = bytes_of(t)?;
            Ok((name, dt, t.dims().to_vec(), bytes))
        })
        .collect::<Result<Vec<_>>>()?;
    let views = arrays
        .iter()
        .map(|(n, dt, shape, bytes)| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.to_string(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(key.to_string(), json.to_string())]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a truncated file behind
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn metadata_of(buf: &[u8], key: &str) -> Result<String> {
    let (_, meta) = SafeTensors::read_metadata(buf).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
    meta.metadata()
        .as_ref()
        .and_then(|m| m.get(key))
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` header")))
}

/// Reads the JSON metadata under `key` and every tensor.
pub(crate) fn read_tensors(path: &Path, key: &str) -> Result<(String, HashMap<String, Tensor>)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let json = metadata_of(&buf, key)?;
    let st = SafeTensors::deserialize(&buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tensors = st.tensors().iter().map(|(n, v)| Ok((n.clone(), tensor_of(v)?))).collect::<Result<_>>()?;
    Ok((json, tensors))
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&metadata_of(&buf, FORMAT_KEY)?)
}

fn parse_header(json: &str) -> Result<Header> {
    let header: Header = serde_json::from_str(json)?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {} (expected {VERSION})", header.version)));
    }
    Ok(header)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let (json, tensors) = read_tensors(path.as_ref(), FORMAT_KEY)?;
    let header = parse_header(&json)?;
    let dtype = parse_dtype(&header.dtype)?;
    let model = match &header.model {
        Some(meta) => {
            if meta.config.hash() != meta.config_hash {
                return Err(Error::Checkpoint("config hash mismatch".into()));
            }
            if meta.n_style != header.style_vocab.len() {
                return Err(Error::Checkpoint("style vocabulary does not match n_style".into()));
            }
            let m = WaeModel::new(meta.config.clone(), meta.n_style, meta.conditioning, dtype, meta.seed)?;
            m.store().load(&tensors)?;
            Some(m)
        }
        None => None,
    };
    let mcnn = match &header.mcnn {
        Some(cfg) => {
            let v = Mcnn::new(cfg.clone(), dtype, 0)?;
            v.store().load(&tensors)?;
            Some(v)
        }
        None => None,
    };
    Ok(Checkpoint { header, model, mcnn })
}
