//! Frozen prompt encoders.
//!
//! Both encoders are fixed, seeded convolution stacks. Kernels are mirror
//! symmetric and borders replicate, so the stacks commute with horizontal
//! flips and map a uniform image to a uniform feature map. The coarse
//! encoder squeezes a prompt into one short vector; the fine encoder keeps
//! a spatial grid of wide features.

use kvmix_tensor::{Conv2dOpts, Padding, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::params::{self, Init, ParamStore};
use crate::seeds::rng_for;

pub const COARSE_PREFIX: &str = "enc_coarse.";
pub const FINE_PREFIX: &str = "enc_fine.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Only `surrogate` is built in.
    pub backend: String,
    pub resolution: usize,
    pub coarse_dim: usize,
    pub fine_grid: usize,
    pub fine_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: "surrogate".into(),
            resolution: 32,
            coarse_dim: 32,
            fine_grid: 8,
            fine_dim: 128,
            seed: 1234,
        }
    }
}

impl EncoderConfig {
    pub fn fine_tokens(&self) -> usize {
        self.fine_grid * self.fine_grid
    }

    /// Number of stride-2 poolings from prompt resolution to the fine grid.
    pub fn fine_pools(&self) -> usize {
        (self.resolution / self.fine_grid).trailing_zeros() as usize
    }

    fn fine_channels(&self) -> Vec<usize> {
        let pools = self.fine_pools();
        let mut ch: Vec<usize> = (0..pools).map(|i| 32 << i).collect();
        ch.push(self.fine_dim);
        ch
    }

    pub fn validate(&self, errors: &mut Vec<String>, section: &str) {
        if self.backend != "surrogate" {
            errors.push(format!(
                "{section}.backend: only \"surrogate\" is available, got \"{}\"",
                self.backend
            ));
        }
        let r = self.resolution;
        let g = self.fine_grid;
        if g == 0 || r < 8 || r % g != 0 || !(r / g).is_power_of_two() {
            errors.push(format!(
                "{section}.resolution / {section}.fine_grid must be a power of two (got {r} / {g})"
            ));
        }
        if r % 4 != 0 {
            errors.push(format!("{section}.resolution must be divisible by 4 (got {r})"));
        }
        if self.coarse_dim == 0 || self.fine_dim == 0 {
            errors.push(format!("{section}.coarse_dim and {section}.fine_dim must be positive"));
        }
        if g * g * self.fine_dim < 64 * self.coarse_dim {
            errors.push(format!(
                "{section}.fine_grid^2 * {section}.fine_dim >= 64 * {section}.coarse_dim (got {} < {})",
                g * g * self.fine_dim,
                64 * self.coarse_dim
            ));
        }
    }
}

/// `(D_c,)` global prompt code.
#[derive(Debug, Clone)]
pub struct CoarseEmbedding(pub Tensor);

/// `(G*G, D_f)` grid tokens in row-major order.
#[derive(Debug, Clone)]
pub struct FineFeatureGrid(pub Tensor);

fn symmetric_conv(init: &mut Init<'_>, key: &str, c_in: usize, c_out: usize) {
    let std = (2.0 / (c_in * 9) as f32).sqrt();
    init.normal(&format!("{key}.weight"), &[c_out, c_in, 3, 3], std);
    let w = init.store.get(&format!("{key}.weight")).to_vec();
    let mut w = w;
    for o in 0..c_out * c_in {
        for ky in 0..3 {
            w[o * 9 + ky * 3 + 2] = w[o * 9 + ky * 3];
        }
    }
    init.store.insert(format!("{key}.weight"), Tensor::from_vec(w, &[c_out, c_in, 3, 3]));
    let b: Vec<f32> = (0..c_out).map(|_| init.uniform(-0.05, 0.1)).collect();
    init.store.insert(format!("{key}.bias"), Tensor::from_vec(b, &[c_out]));
}

/// Adds both encoders' frozen weights to `store`.
pub fn init_encoders(store: &mut ParamStore, cfg: &EncoderConfig) {
    let mut init = Init::new(store, rng_for(cfg.seed, &[0xe1c0]));
    let coarse = [3, 16, 32, 64];
    for i in 0..3 {
        symmetric_conv(&mut init, &format!("{COARSE_PREFIX}conv{i}"), coarse[i], coarse[i + 1]);
    }
    init.linear(&format!("{COARSE_PREFIX}proj"), 64, cfg.coarse_dim, true);
    let mut c_in = 3;
    for (i, c) in cfg.fine_channels().into_iter().enumerate() {
        symmetric_conv(&mut init, &format!("{FINE_PREFIX}conv{i}"), c_in, c);
        c_in = c;
    }
}

fn opts() -> Conv2dOpts {
    Conv2dOpts {
        stride: 1,
        padding: 1,
        mode: Padding::Replicate,
    }
}

fn check_resolution(img: &ImageGrid, cfg: &EncoderConfig) -> Result<()> {
    if img.height != cfg.resolution || img.width != cfg.resolution {
        return Err(Error::Resolution {
            expected: cfg.resolution,
            height: img.height,
            width: img.width,
        });
    }
    Ok(())
}

/// `(N, 3, R, R)` batch in `[-1, 1]`.
fn batch(images: &[&ImageGrid], cfg: &EncoderConfig) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(images.len());
    for img in images {
        check_resolution(img, cfg)?;
        parts.push(img.to_model_tensor());
    }
    Ok(Tensor::concat(&parts, 0))
}

/// Coarse codes for a batch of prompts, `(N, D_c)`.
pub fn encode_coarse_batch(p: &ParamStore, cfg: &EncoderConfig, images: &[&ImageGrid]) -> Result<Tensor> {
    let mut x = batch(images, cfg)?;
    for i in 0..3 {
        x = params::conv(p, &format!("{COARSE_PREFIX}conv{i}"), &x, opts()).relu();
        if i < 2 {
            x = x.avg_pool2();
        }
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let pooled = x.reshape(&[n, c, x.dim(2) * x.dim(3)]).mean_axis(2);
    Ok(params::linear(p, &format!("{COARSE_PREFIX}proj"), &pooled))
}

/// Per-layer fine activations, NCHW, before pooling. The last entry is
/// the grid itself.
pub fn fine_activations(p: &ParamStore, cfg: &EncoderConfig, x: &Tensor) -> Vec<Tensor> {
    let layers = cfg.fine_pools() + 1;
    let mut acts = Vec::with_capacity(layers);
    let mut x = x.clone();
    for i in 0..layers {
        x = params::conv(p, &format!("{FINE_PREFIX}conv{i}"), &x, opts());
        if i + 1 < layers {
            x = x.relu();
            acts.push(x.clone());
            x = x.avg_pool2();
        } else {
            acts.push(x.clone());
        }
    }
    acts
}

/// Fine grids for a batch of prompts, `(N, G*G, D_f)`.
pub fn encode_fine_batch(p: &ParamStore, cfg: &EncoderConfig, images: &[&ImageGrid]) -> Result<Tensor> {
    let x = batch(images, cfg)?;
    let grid = fine_activations(p, cfg, &x).pop().expect("at least one layer");
    let (n, c, h, w) = (grid.dim(0), grid.dim(1), grid.dim(2), grid.dim(3));
    Ok(grid.reshape(&[n, c, h * w]).permute(&[0, 2, 1]))
}

pub fn encode_coarse(p: &ParamStore, cfg: &EncoderConfig, image: &ImageGrid) -> Result<CoarseEmbedding> {
    let t = encode_coarse_batch(p, cfg, &[image])?;
    Ok(CoarseEmbedding(t.reshape(&[cfg.coarse_dim])))
}

pub fn encode_fine(p: &ParamStore, cfg: &EncoderConfig, image: &ImageGrid) -> Result<FineFeatureGrid> {
    let t = encode_fine_batch(p, cfg, &[image])?;
    Ok(FineFeatureGrid(t.reshape(&[cfg.fine_tokens(), cfg.fine_dim])))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
