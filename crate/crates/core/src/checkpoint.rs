//! Binary checkpoints: a JSON manifest header followed by raw little-endian arrays.
//!
//! Layout: `AGGPCKPT` magic, `u32` format version, `u64` header length, the
//! header bytes, then every tensor's data at the offset its manifest entry
//! names (relative to the end of the header).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use aggpose_data::io::write_atomic;
use aggpose_tensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"AGGPCKPT";
pub const FORMAT_VERSION: u32 = 1;

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the data section.
    pub offset: u64,
    /// Byte length.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    /// Step count per model parameter, in manifest order.
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub config_hash: String,
    pub step: u64,
    #[serde(default)]
    pub frozen: Vec<String>,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerHeader>,
    /// Free-form trainer state.
    #[serde(default)]
    pub trainer: serde_json::Value,
}

/// Parameters (and optionally optimizer moments) of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    pub step: u64,
    pub frozen: Vec<String>,
    /// Model parameters in store order, then optimizer moments.
    pub tensors: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<OptimizerHeader>,
    pub trainer: serde_json::Value,
}

fn encode_into<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    match T::DTYPE {
        DType::F32 => t.data().iter().for_each(|v| out.extend((v.to_f64() as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| out.extend(v.to_f64().to_le_bytes())),
    }
}

fn decode<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, step: u64) -> Self {
        Checkpoint {
            config: model.config().clone(),
            step,
            frozen: model.store.frozen_names().iter().map(|s| s.to_string()).collect(),
            tensors: model
                .store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: None,
            trainer: serde_json::Value::Null,
        }
    }

    /// Attach optimizer moments as `optim.m.<name>` / `optim.v.<name>` entries.
    pub fn with_optimizer(mut self, store: &ParamStore<T>, opt: &AdamW<T>) -> Self {
        for (p, st) in store.params().iter().zip(&opt.moments) {
            self.tensors.push((format!("{OPTIM_M}{}", p.name), st.m.clone()));
            self.tensors.push((format!("{OPTIM_V}{}", p.name), st.v.clone()));
        }
        self.optimizer = Some(OptimizerHeader {
            config: opt.config,
            steps: opt.moments.iter().map(|m| m.step).collect(),
        });
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Names of model parameters (optimizer entries excluded).
    pub fn param_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !n.starts_with(OPTIM_M) && !n.starts_with(OPTIM_V))
            .collect()
    }

    /// Restore the optimizer for `store`; `None` when none was saved.
    pub fn restore_optimizer(&self, store: &ParamStore<T>) -> Result<Option<AdamW<T>>> {
        let Some(header) = &self.optimizer else {
            return Ok(None);
        };
        if header.steps.len() != store.len() {
            return Err(CoreError::Load(format!(
                "optimizer state covers {} parameters, model has {}",
                header.steps.len(),
                store.len()
            )));
        }
        let index: BTreeMap<&str, &Tensor<T>> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut moments = Vec::with_capacity(store.len());
        for (p, &step) in store.params().iter().zip(&header.steps) {
            let fetch = |prefix: &str| -> Result<Tensor<T>> {
                let t = index
                    .get(format!("{prefix}{}", p.name).as_str())
                    .ok_or_else(|| CoreError::Load(format!("no optimizer state for {}", p.name)))?;
                if t.shape() != p.value.shape() {
                    return Err(CoreError::Load(format!("optimizer state shape mismatch for {}", p.name)));
                }
                Ok((*t).clone())
            };
            moments.push(Moments {
                m: fetch(OPTIM_M)?,
                v: fetch(OPTIM_V)?,
                step,
            });
        }
        Ok(Some(AdamW {
            config: header.config,
            moments,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = data.len() as u64;
            encode_into(t, &mut data);
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.name().into(),
                offset,
                len: data.len() as u64 - offset,
            });
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            frozen: self.frozen.clone(),
            tensors: entries,
            optimizer: self.optimizer.clone(),
            trainer: self.trainer.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(header);
        out.extend(data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let data_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start]).map_err(|e| format!("bad header: {e}"))?;
        if header.config.hash() != header.config_hash {
            return Err("config hash does not match the stored config".into());
        }
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut seen = BTreeSet::new();
        for e in &header.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(format!("duplicate manifest entry {}", e.name));
            }
            let dtype = DType::parse(&e.dtype).ok_or_else(|| format!("{}: unknown dtype {}", e.name, e.dtype))?;
            let numel: usize = e.shape.iter().product();
            if e.len as usize != numel * dtype.size_of() {
                return Err(format!("{}: byte length {} does not match shape {:?}", e.name, e.len, e.shape));
            }
            let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
            if end > data.len() {
                return Err(format!("{}: data runs past end of file", e.name));
            }
            let values = decode::<T>(&data[start..end], dtype);
            let t = Tensor::new(&e.shape, values).map_err(|err| format!("{}: {err}", e.name))?;
            tensors.push((e.name.clone(), t));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            frozen: header.frozen,
            tensors,
            optimizer: header.optimizer,
            trainer: header.trainer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| CoreError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// How checkpoint entries are matched to model parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadPolicy {
    /// Every model parameter must be present and nothing else may be.
    Strict,
    /// Load parameters whose names start with any prefix (all when empty)
    /// and exist in the checkpoint; report the rest.
    ByPrefix(Vec<String>),
    /// Load every matching name, then freeze the listed levels (1-based).
    PerLevelFrozen(Vec<usize>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters left at their current values.
    pub missing: Vec<String>,
    /// Checkpoint parameters with no counterpart in the model.
    pub unexpected: Vec<String>,
    pub frozen: Vec<String>,
}

/// Copy checkpoint parameters into `model` under `policy`. Shape conflicts
/// are errors under every policy.
pub fn load_partial<T: Scalar>(model: &mut Model<T>, ckpt: &Checkpoint<T>, policy: &LoadPolicy) -> Result<LoadReport> {
    let source: BTreeMap<&str, &Tensor<T>> = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with(OPTIM_M) && !n.starts_with(OPTIM_V))
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut report = LoadReport::default();
    let wanted = |name: &str| match policy {
        LoadPolicy::ByPrefix(prefixes) if !prefixes.is_empty() => prefixes.iter().any(|p| name.starts_with(p.as_str())),
        _ => true,
    };
    let mut updates = Vec::new();
    for id in model.store.ids() {
        let p = model.store.get(id);
        match source.get(p.name.as_str()) {
            Some(t) if wanted(&p.name) => {
                if t.shape() != p.value.shape() {
                    return Err(CoreError::Load(format!(
                        "{}: checkpoint shape {:?}, model shape {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                }
                updates.push((id, (*t).clone()));
                report.loaded.push(p.name.clone());
            }
            _ => report.missing.push(p.name.clone()),
        }
    }
    report.unexpected = source
        .keys()
        .filter(|n| model.store.id(n).is_none())
        .map(|n| n.to_string())
        .collect();
    if *policy == LoadPolicy::Strict && !(report.missing.is_empty() && report.unexpected.is_empty()) {
        return Err(CoreError::Load(format!(
            "strict load: {} missing (first: {:?}), {} unexpected (first: {:?})",
            report.missing.len(),
            report.missing.first(),
            report.unexpected.len(),
            report.unexpected.first()
        )));
    }
    for (id, t) in updates {
        model.store.get_mut(id).value = t;
    }
    match policy {
        LoadPolicy::Strict => {
            let frozen: BTreeSet<&str> = ckpt.frozen.iter().map(String::as_str).collect();
            model.store.unfreeze_all();
            model.store.set_frozen_where(true, |n| frozen.contains(n));
        }
        LoadPolicy::PerLevelFrozen(levels) => {
            model.store.freeze_levels(levels);
        }
        LoadPolicy::ByPrefix(_) => {}
    }
    report.frozen = model
        .store
        .params()
        .iter()
        .filter(|p| p.frozen)
        .map(|p| p.name.clone())
        .collect();
    Ok(report)
}

impl<T: Scalar> Model<T> {
    /// Build the checkpoint's architecture and load it strictly.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut model = Model::build(&ckpt.config, 0)?;
        load_partial(&mut model, ckpt, &LoadPolicy::Strict)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        Checkpoint::from_model(self, step).save(path)
    }
}
