//! Named parameter storage shared by every network, plus the small layer
//! helpers that read from it.

use std::collections::BTreeMap;

use kvmix_tensor::{Conv2dOpts, Gradients, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Flat map from dotted parameter names to tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.map.insert(key.into(), value);
    }

    /// Panics on a missing key: parameter names are fixed by the builders,
    /// so a miss is a programming error.
    pub fn get(&self, key: &str) -> &Tensor {
        self.map
            .get(key)
            .unwrap_or_else(|| panic!("parameter `{key}` not found"))
    }

    pub fn try_get(&self, key: &str) -> Option<&Tensor> {
        self.map.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.map.extend(other.map);
    }

    pub fn count_params(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Copy where every parameter selected by `pred` becomes a fresh
    /// gradient leaf and everything else is a constant.
    pub fn with_trainable(&self, pred: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, t)| {
                    let t = if pred(k) { t.to_var() } else { t.detach() };
                    (k.clone(), t)
                })
                .collect(),
        }
    }

    pub fn detached(&self) -> ParamStore {
        self.with_trainable(|_| false)
    }

    /// Gradients for the parameters selected by `pred`, zero-filled where
    /// no gradient reached.
    pub fn collect_grads(&self, grads: &Gradients, pred: impl Fn(&str) -> bool) -> BTreeMap<String, Vec<f32>> {
        self.map
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(k, t)| {
                let g = grads.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]);
                (k.clone(), g)
            })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian data of every parameter
    /// selected by `pred`, in key order.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, t) in self.map.iter().filter(|(k, _)| pred(k)) {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn prefix_checksum(&self, prefix: &str) -> String {
        self.checksum(|k| k.starts_with(prefix))
    }

    pub fn replace(&mut self, key: &str, data: Vec<f32>) -> Result<()> {
        let t = self
            .map
            .get_mut(key)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{key}`")))?;
        if t.numel() != data.len() {
            return Err(Error::Shape(format!(
                "`{key}` holds {} values, got {}",
                t.numel(),
                data.len()
            )));
        }
        *t = Tensor::from_vec(data, t.shape());
        Ok(())
    }
}

/// Seeded parameter initialisation.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn normal(&mut self, key: &str, shape: &[usize], std: f32) {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(key, Tensor::from_vec(data, shape));
    }

    pub fn constant(&mut self, key: &str, shape: &[usize], value: f32) {
        self.store.insert(key, Tensor::full(shape, value));
    }

    /// Weight stored `(in, out)` so inputs multiply on the left.
    pub fn linear(&mut self, key: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.normal(&format!("{key}.weight"), &[fan_in, fan_out], (1.0 / fan_in as f32).sqrt());
        if bias {
            self.constant(&format!("{key}.bias"), &[fan_out], 0.0);
        }
    }

    pub fn linear_zero(&mut self, key: &str, fan_in: usize, fan_out: usize) {
        self.constant(&format!("{key}.weight"), &[fan_in, fan_out], 0.0);
    }

    pub fn conv(&mut self, key: &str, c_in: usize, c_out: usize, k: usize) {
        let fan_in = c_in * k * k;
        self.normal(&format!("{key}.weight"), &[c_out, c_in, k, k], (2.0 / fan_in as f32).sqrt());
        self.constant(&format!("{key}.bias"), &[c_out], 0.0);
    }

    pub fn norm(&mut self, key: &str, channels: usize) {
        self.constant(&format!("{key}.gamma"), &[channels], 1.0);
        self.constant(&format!("{key}.beta"), &[channels], 0.0);
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        self.rng.random_range(lo..hi)
    }
}

pub fn linear(p: &ParamStore, key: &str, x: &Tensor) -> Tensor {
    let y = x.matmul(p.get(&format!("{key}.weight")));
    match p.try_get(&format!("{key}.bias")) {
        Some(b) => y.add(b),
        None => y,
    }
}

pub fn layer_norm(p: &ParamStore, key: &str, x: &Tensor) -> Tensor {
    x.layer_norm(p.get(&format!("{key}.gamma")), p.get(&format!("{key}.beta")), 1e-5)
}

pub fn group_norm(p: &ParamStore, key: &str, x: &Tensor, groups: usize) -> Tensor {
    x.group_norm(
        groups,
        p.get(&format!("{key}.gamma")),
        p.get(&format!("{key}.beta")),
        1e-5,
    )
}

pub fn conv(p: &ParamStore, key: &str, x: &Tensor, opts: Conv2dOpts) -> Tensor {
    x.conv2d(
        p.get(&format!("{key}.weight")),
        Some(p.get(&format!("{key}.bias"))),
        opts,
    )
}

/// Multi-head scaled dot-product attention on `(B, L, H*d)` inputs.
/// Returns the output and the probabilities `(B*H, Lq, Lk)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, mask: Option<&[bool]>) -> (Tensor, Tensor) {
    let (b, lq, width) = (q.dim(0), q.dim(1), q.dim(2));
    let lk = k.dim(1);
    let d = width / heads;
    let split = |t: &Tensor, l: usize| t.reshape(&[b, l, heads, d]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, l, d]);
    let (qh, kh, vh) = (split(q, lq), split(k, lk), split(v, lk));
    let mut logits = qh.matmul_t(&kh, false, true).scale(1.0 / (d as f32).sqrt());
    if let Some(m) = mask {
        logits = logits.masked_fill(std::sync::Arc::new(m.to_vec()), f32::MIN);
    }
    let probs = logits.softmax();
    let out = probs
        .matmul(&vh)
        .reshape(&[b, heads, lq, d])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, lq, width]);
    (out, probs)
}

/// Fixed sinusoidal encoding of `positions` into `width` channels.
pub fn sinusoidal(positions: &[f32], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(positions.len() * width);
    for &p in positions {
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            data.push((p * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
            data.push((p * freq).cos());
        }
        if width % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::from_vec(data, &[positions.len(), width])
}
