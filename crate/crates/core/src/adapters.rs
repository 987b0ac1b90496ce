//! Prompt adapters: coarse codes become layout tokens, fine grids become
//! appearance tokens, and a prompt set becomes one concatenated bundle.

use std::ops::Range;

use kvmix_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoders::{self, CoarseEmbedding, EncoderConfig, FineFeatureGrid};
use crate::error::{Error, Result};
use crate::params::{self, sinusoidal, Init, ParamStore};
use crate::seeds::rng_for;
use crate::sprite_world::VisualPromptSet;

pub const LAYOUT_PREFIX: &str = "adapter_layout.";
pub const APP_PREFIX: &str = "adapter_app.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Tokens per prompt, shared by the layout and appearance streams.
    pub tokens_per_prompt: usize,
    pub perceiver_blocks: usize,
    pub perceiver_heads: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            tokens_per_prompt: 16,
            perceiver_blocks: 2,
            perceiver_heads: 4,
        }
    }
}

/// Which encoder feeds each stream. The single-encoder variants feed the
/// same tokens to keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMix {
    Mixed,
    CoarseOnly,
    FineOnly,
}

impl EncoderMix {
    pub fn label(self) -> &'static str {
        match self {
            EncoderMix::Mixed => "mixed",
            EncoderMix::CoarseOnly => "coarse-only",
            EncoderMix::FineOnly => "fine-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EncoderMix::Mixed, EncoderMix::CoarseOnly, EncoderMix::FineOnly]
            .into_iter()
            .find(|m| m.label() == s)
    }
}

/// `(T, D)` tokens from the coarse stream.
#[derive(Debug, Clone)]
pub struct LayoutTokens(pub Tensor);

/// `(T, D)` tokens from the fine stream.
#[derive(Debug, Clone)]
pub struct AppearanceTokens(pub Tensor);

/// Parameter count of the layout adapter.
pub fn layout_param_count(coarse_dim: usize, tokens: usize, width: usize) -> usize {
    coarse_dim * tokens * width + tokens * width + 2 * width
}

/// Parameter count of the appearance adapter.
pub fn appearance_param_count(fine_dim: usize, tokens: usize, width: usize, blocks: usize) -> usize {
    fine_dim * width + width + tokens * width + blocks * (8 * width * width + 10 * width) + 2 * width
}

pub fn init_adapters(store: &mut ParamStore, enc: &EncoderConfig, cfg: &AdapterConfig, width: usize, seed: u64) {
    let mut init = Init::new(store, rng_for(seed, &[0xada9]));
    let t = cfg.tokens_per_prompt;
    init.linear(&format!("{LAYOUT_PREFIX}proj"), enc.coarse_dim, t * width, true);
    init.norm(&format!("{LAYOUT_PREFIX}norm"), width);

    init.linear(&format!("{APP_PREFIX}proj_in"), enc.fine_dim, width, true);
    init.normal(&format!("{APP_PREFIX}latents"), &[t, width], 0.02);
    for b in 0..cfg.perceiver_blocks {
        let k = format!("{APP_PREFIX}block{b}");
        init.norm(&format!("{k}.norm_q"), width);
        init.norm(&format!("{k}.norm_kv"), width);
        init.linear(&format!("{k}.to_q"), width, width, false);
        init.linear(&format!("{k}.to_k"), width, width, false);
        init.linear(&format!("{k}.to_v"), width, width, false);
        init.linear(&format!("{k}.to_out"), width, width, true);
        init.norm(&format!("{k}.norm_ff"), width);
        init.linear(&format!("{k}.ff1"), width, 2 * width, true);
        init.linear(&format!("{k}.ff2"), 2 * width, width, true);
    }
    init.norm(&format!("{APP_PREFIX}norm_out"), width);
}

/// `(N, D_c)` codes to `(N, T, D)` tokens.
pub fn layout_tokens_batch(p: &ParamStore, cfg: &AdapterConfig, coarse: &Tensor) -> Tensor {
    let n = coarse.dim(0);
    let proj = params::linear(p, &format!("{LAYOUT_PREFIX}proj"), coarse);
    let width = proj.dim(1) / cfg.tokens_per_prompt;
    params::layer_norm(
        p,
        &format!("{LAYOUT_PREFIX}norm"),
        &proj.reshape(&[n, cfg.tokens_per_prompt, width]),
    )
}

pub fn layout_tokens(p: &ParamStore, cfg: &AdapterConfig, emb: &CoarseEmbedding) -> LayoutTokens {
    let d = emb.0.numel();
    let t = layout_tokens_batch(p, cfg, &emb.0.reshape(&[1, d]));
    LayoutTokens(t.reshape(&[cfg.tokens_per_prompt, t.dim(2)]))
}

/// Fixed grid positional encodings `(G*G, D_f)`.
pub fn grid_positions(grid: usize, fine_dim: usize) -> Tensor {
    // Row and column are encoded in separate halves of the channels.
    let half = fine_dim / 2;
    let rows: Vec<f32> = (0..grid * grid).map(|i| (i / grid) as f32).collect();
    let cols: Vec<f32> = (0..grid * grid).map(|i| (i % grid) as f32).collect();
    Tensor::concat(&[sinusoidal(&rows, half), sinusoidal(&cols, fine_dim - half)], 1)
}

/// Perceiver resampler over `(N, G*G, D_f)` grids with explicit positional
/// encodings `(G*G, D_f)`.
pub fn appearance_tokens_with_positions(p: &ParamStore, cfg: &AdapterConfig, grid: &Tensor, positions: &Tensor) -> Tensor {
    let n = grid.dim(0);
    let x = params::linear(p, &format!("{APP_PREFIX}proj_in"), &grid.add(positions));
    let latents = p.get(&format!("{APP_PREFIX}latents"));
    let width = latents.dim(1);
    let mut lat = Tensor::zeros(&[n, cfg.tokens_per_prompt, width]).add(latents);
    for b in 0..cfg.perceiver_blocks {
        let k = format!("{APP_PREFIX}block{b}");
        let qn = params::layer_norm(p, &format!("{k}.norm_q"), &lat);
        let kv = params::layer_norm(p, &format!("{k}.norm_kv"), &x);
        let (att, _) = params::multi_head_attention(
            &params::linear(p, &format!("{k}.to_q"), &qn),
            &params::linear(p, &format!("{k}.to_k"), &kv),
            &params::linear(p, &format!("{k}.to_v"), &kv),
            cfg.perceiver_heads,
            None,
        );
        lat = lat.add(&params::linear(p, &format!("{k}.to_out"), &att));
        let h = params::layer_norm(p, &format!("{k}.norm_ff"), &lat);
        let h = params::linear(p, &format!("{k}.ff1"), &h).silu();
        lat = lat.add(&params::linear(p, &format!("{k}.ff2"), &h));
    }
    params::layer_norm(p, &format!("{APP_PREFIX}norm_out"), &lat)
}

pub fn appearance_tokens_batch(p: &ParamStore, cfg: &AdapterConfig, grid: &Tensor) -> Tensor {
    let side = (grid.dim(1) as f64).sqrt() as usize;
    appearance_tokens_with_positions(p, cfg, grid, &grid_positions(side, grid.dim(2)))
}

pub fn appearance_tokens(p: &ParamStore, cfg: &AdapterConfig, grid: &FineFeatureGrid) -> AppearanceTokens {
    let (g, d) = (grid.0.dim(0), grid.0.dim(1));
    let t = appearance_tokens_batch(p, cfg, &grid.0.reshape(&[1, g, d]));
    AppearanceTokens(t.reshape(&[cfg.tokens_per_prompt, t.dim(2)]))
}

/// Concatenated per-prompt tokens of one prompt set. Row `i` of `layout`
/// pairs with row `i` of `appearance`.
#[derive(Debug, Clone)]
pub struct PromptTokenBundle {
    /// `(N*T, D)` key source.
    pub layout: Tensor,
    /// `(N*T, D)` value source.
    pub appearance: Tensor,
    pub spans: Vec<Range<usize>>,
}

impl PromptTokenBundle {
    /// Checks pairing and span coverage.
    pub fn new(layout: Tensor, appearance: Tensor, spans: Vec<Range<usize>>) -> Result<Self> {
        if layout.shape() != appearance.shape() || layout.rank() != 2 {
            return Err(Error::SpanMismatch(format!(
                "layout {:?} and appearance {:?} tokens must pair one to one",
                layout.shape(),
                appearance.shape()
            )));
        }
        let mut next = 0;
        for s in &spans {
            if s.start != next || s.end <= s.start {
                return Err(Error::SpanMismatch(format!("span {s:?} does not continue at {next}")));
            }
            next = s.end;
        }
        if next != layout.dim(0) {
            return Err(Error::SpanMismatch(format!(
                "spans cover {next} of {} tokens",
                layout.dim(0)
            )));
        }
        Ok(Self {
            layout,
            appearance,
            spans,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.spans.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layout.dim(0)
    }

    pub fn width(&self) -> usize {
        self.layout.dim(1)
    }

    /// `(N*T, N)` 0/1 matrix mapping tokens to their prompt.
    pub fn span_indicator(&self) -> Tensor {
        let (nt, n) = (self.num_tokens(), self.num_prompts());
        let mut data = vec![0.0; nt * n];
        for (k, s) in self.spans.iter().enumerate() {
            for i in s.clone() {
                data[i * n + k] = 1.0;
            }
        }
        Tensor::from_vec(data, &[nt, n])
    }

    pub fn with_appearance(&self, appearance: Tensor) -> Result<Self> {
        Self::new(self.layout.clone(), appearance, self.spans.clone())
    }

    pub fn detached(&self) -> Self {
        Self {
            layout: self.layout.detach(),
            appearance: self.appearance.detach(),
            spans: self.spans.clone(),
        }
    }
}

/// Frozen encoder outputs for one prompt set.
#[derive(Debug, Clone)]
pub struct PromptCodes {
    /// `(N, D_c)`
    pub coarse: Tensor,
    /// `(N, G*G, D_f)`
    pub fine: Tensor,
}

pub fn encode_prompts(p: &ParamStore, enc: &EncoderConfig, set: &VisualPromptSet) -> Result<PromptCodes> {
    let imgs: Vec<_> = set.prompts.iter().map(|pr| &pr.pixels).collect();
    Ok(PromptCodes {
        coarse: encoders::encode_coarse_batch(p, enc, &imgs)?,
        fine: encoders::encode_fine_batch(p, enc, &imgs)?,
    })
}

/// Runs the adapters on cached codes.
pub fn bundle_from_codes(p: &ParamStore, cfg: &AdapterConfig, codes: &PromptCodes, mix: EncoderMix) -> Result<PromptTokenBundle> {
    let n = codes.coarse.dim(0);
    let t = cfg.tokens_per_prompt;
    let (layout, appearance) = match mix {
        EncoderMix::Mixed => (
            layout_tokens_batch(p, cfg, &codes.coarse),
            appearance_tokens_batch(p, cfg, &codes.fine),
        ),
        EncoderMix::CoarseOnly => {
            let l = layout_tokens_batch(p, cfg, &codes.coarse);
            (l.clone(), l)
        }
        EncoderMix::FineOnly => {
            let a = appearance_tokens_batch(p, cfg, &codes.fine);
            (a.clone(), a)
        }
    };
    let width = layout.dim(2);
    let spans = (0..n).map(|k| k * t..(k + 1) * t).collect();
    PromptTokenBundle::new(
        layout.reshape(&[n * t, width]),
        appearance.reshape(&[n * t, width]),
        spans,
    )
}

pub fn bundle_prompts(
    p: &ParamStore,
    enc: &EncoderConfig,
    cfg: &AdapterConfig,
    set: &VisualPromptSet,
    mix: EncoderMix,
) -> Result<PromptTokenBundle> {
    bundle_from_codes(p, cfg, &encode_prompts(p, enc, set)?, mix)
}
