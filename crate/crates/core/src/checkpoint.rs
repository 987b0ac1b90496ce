//! Single-file checkpoint container.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then a
//! blob of little-endian `f32` values. The header lists every tensor with
//! its shape and element offset into the blob, the model and training
//! configuration snapshots, frozen-module checksums, the optimizer
//! hyperparameters and the step counter. Optimizer moments are stored as
//! tensors under `optim/m/<key>` and `optim/v/<key>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use kvmix_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::adapters::EncoderMix;
use crate::error::{Error, Result};
use crate::model::{frozen_groups, ModelConfig};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Text-only base model.
    Base,
    /// Adapters on top of a frozen base.
    Adapters,
}

/// First-order adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter with a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let step = (self.lr as f64 * c2.sqrt() / c1) as f32;
        for (key, g) in grads {
            let w = params
                .try_get(key)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {key}")))?;
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = w.to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                data[i] -= step * m[i] / (v[i].sqrt() + self.eps);
            }
            params.replace(key, data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimHeader {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: Stage,
    step: u64,
    mix: Option<EncoderMix>,
    model_config: ModelConfig,
    train_config: serde_json::Value,
    frozen_checksums: BTreeMap<String, String>,
    optimizer: Option<OptimHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub mix: Option<EncoderMix>,
    pub model_config: ModelConfig,
    pub train_config: serde_json::Value,
    /// Checksums of the modules that must stay frozen, by group name.
    pub frozen_checksums: BTreeMap<String, String>,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

/// Checksums of the groups frozen in `stage`.
pub fn frozen_checksums(params: &ParamStore, stage: Stage) -> BTreeMap<String, String> {
    frozen_groups()
        .into_iter()
        .filter(|(name, _)| stage == Stage::Adapters || name.starts_with("enc_"))
        .map(|(name, pred)| (name.to_string(), params.checksum(pred)))
        .collect()
}

fn verify_frozen(params: &ParamStore, expected: &BTreeMap<String, String>) -> Result<()> {
    for (name, pred) in frozen_groups() {
        if let Some(want) = expected.get(name) {
            let found = params.checksum(pred);
            if &found != want {
                return Err(Error::FrozenChecksum {
                    module: name.to_string(),
                    expected: want.clone(),
                    found,
                });
            }
        }
    }
    Ok(())
}

/// Dotted paths of every leaf where two configurations differ.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(&p, u, v, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    walk("model", &va, &vb, &mut out);
    out
}

impl Checkpoint {
    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        verify_frozen(&self.params, &self.frozen_checksums)?;
        let mut tensors = Vec::new();
        let mut blob: Vec<f32> = Vec::new();
        let mut push = |key: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                key,
                shape,
                offset: blob.len(),
            });
            blob.extend_from_slice(data);
        };
        for (k, t) in self.params.iter() {
            push(k.clone(), t.shape().to_vec(), t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (k, m) in &opt.m {
                push(format!("{OPTIM_M}{k}"), vec![m.len()], m);
            }
            for (k, v) in &opt.v {
                push(format!("{OPTIM_V}{k}"), vec![v.len()], v);
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            stage: self.stage,
            step: self.step,
            mix: self.mix,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            frozen_checksums: self.frozen_checksums.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimHeader {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                t: o.t,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            for v in &blob {
                f.write_all(&v.to_le_bytes())?;
            }
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads and validates a checkpoint. With `expected`, the stored model
    /// configuration must match it exactly.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut len = [0u8; 8];
        f.read_exact(&mut len)?;
        let hlen = u64::from_le_bytes(len) as usize;
        if hlen > 1 << 30 {
            return Err(Error::Checkpoint(format!("implausible header length {hlen}")));
        }
        let mut hbytes = vec![0u8; hlen];
        f.read_exact(&mut hbytes)?;
        let header: Header = serde_json::from_slice(&hbytes)
            .map_err(|e| Error::Checkpoint(format!("bad header in {}: {e}", path.display())))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        if let Some(exp) = expected {
            let diff = config_diff(exp, &header.model_config);
            if !diff.is_empty() {
                return Err(Error::IncompatibleConfig(diff));
            }
        }
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        if raw.len() % 4 != 0 {
            return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
        }
        let blob: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = blob
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the blob", e.key)))?
                .to_vec();
            if let Some(k) = e.key.strip_prefix(OPTIM_M) {
                m.insert(k.to_string(), data);
            } else if let Some(k) = e.key.strip_prefix(OPTIM_V) {
                v.insert(k.to_string(), data);
            } else {
                params.insert(e.key.clone(), Tensor::from_vec(data, &e.shape));
            }
        }
        verify_frozen(&params, &header.frozen_checksums)?;
        let optimizer = header.optimizer.map(|o| AdamState {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
            m,
            v,
        });
        Ok(Self {
            stage: header.stage,
            step: header.step,
            mix: header.mix,
            model_config: header.model_config,
            train_config: header.train_config,
            frozen_checksums: header.frozen_checksums,
            params,
            optimizer,
        })
    }

    /// Per-key shapes, for documentation and inspection.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect()
    }
}

/// Rewrites one frozen checksum in the header of an existing file.
pub fn tamper_checksum(path: &Path, module: &str, value: &str) -> Result<()> {
    let bytes = fs::read(path)?;
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let mut header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
    header.frozen_checksums.insert(module.to_string(), value.to_string());
    let json = serde_json::to_vec(&header)?;
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes[8 + hlen..]);
    fs::write(path, out)?;
    Ok(())
}
