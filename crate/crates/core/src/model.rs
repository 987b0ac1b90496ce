//! The denoiser: a small pixel-space UNet whose cross-attention sites are
//! all KV-mixed decoupled layers, plus the caption encoder, prompt
//! adapters and frozen prompt encoders that feed it.

use kvmix_tensor::{Conv2dOpts, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterConfig, EncoderMix, PromptTokenBundle, APP_PREFIX, LAYOUT_PREFIX};
use crate::attention::{self, AttentionParams, AttentionRecord, Conditioning, MaskOverride};
use crate::diffusion::{self, NoiseSchedule, ScheduleConfig};
use crate::encoders::{self, EncoderConfig, COARSE_PREFIX, FINE_PREFIX};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::params::{self, sinusoidal, Init, ParamStore};
use crate::seeds::rng_for;
use crate::sprite_world::{self, MAX_CAPTION_LEN, PAD_TOKEN};

pub const UNET_PREFIX: &str = "unet.";
pub const TEXT_PREFIX: &str = "text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub head_count: usize,
    pub vocab_size: usize,
    pub token_width: usize,
    pub max_caption_len: usize,
    /// Resolution whose decoupled layers feed the attention loss.
    pub xa_resolution: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            channel_mults: vec![1, 2, 2],
            attention_resolutions: vec![16, 8],
            head_count: 4,
            vocab_size: sprite_world::vocab_size(),
            token_width: 64,
            max_caption_len: MAX_CAPTION_LEN,
            xa_resolution: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn validate(&self, errors: &mut Vec<String>, section: &str) {
        let levels = self.channel_mults.len();
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            errors.push(format!("{section}.channel_mults must be non-empty and positive"));
        }
        if self.image_size == 0 || levels == 0 || self.image_size % (1 << (levels - 1).min(30)) != 0 {
            errors.push(format!(
                "{section}.image_size must be divisible by 2^(levels-1) (got {} with {levels} levels)",
                self.image_size
            ));
        }
        if self.head_count == 0 || self.token_width % self.head_count.max(1) != 0 {
            errors.push(format!(
                "{section}.token_width must be divisible by {section}.head_count (got {} and {})",
                self.token_width, self.head_count
            ));
        }
        for c in self.channels() {
            if c % group_count(c) != 0 || c < 2 {
                errors.push(format!("{section}.base_channels gives unsupported channel count {c}"));
            }
        }
        let resolutions: Vec<usize> = (0..levels).map(|l| self.level_resolution(l)).collect();
        for r in &self.attention_resolutions {
            if !resolutions.contains(r) {
                errors.push(format!(
                    "{section}.attention_resolutions entry {r} is not a level resolution ({resolutions:?})"
                ));
            }
        }
        if !self.attention_resolutions.contains(&self.xa_resolution) {
            errors.push(format!(
                "{section}.xa_resolution {} must be one of {section}.attention_resolutions",
                self.xa_resolution
            ));
        }
        if self.vocab_size < sprite_world::vocab_size() {
            errors.push(format!(
                "{section}.vocab_size must cover the caption vocabulary ({} words)",
                sprite_world::vocab_size()
            ));
        }
        if self.max_caption_len == 0 {
            errors.push(format!("{section}.max_caption_len must be positive"));
        }
    }
}

fn group_count(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub encoders: EncoderConfig,
    pub adapters: AdapterConfig,
    pub schedule: ScheduleConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        self.denoiser.validate(errors, "model.denoiser");
        self.encoders.validate(errors, "model.encoders");
        if self.adapters.tokens_per_prompt == 0 {
            errors.push("model.adapters.tokens_per_prompt must be positive".into());
        }
        let h = self.adapters.perceiver_heads;
        if h == 0 || self.denoiser.token_width % h.max(1) != 0 {
            errors.push(format!(
                "model.denoiser.token_width must be divisible by model.adapters.perceiver_heads (got {} and {h})",
                self.denoiser.token_width
            ));
        }
        if self.schedule.steps < 2 {
            errors.push("model.schedule.steps must be at least 2".into());
        }
        if !(0.0 < self.schedule.beta_start
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            errors.push("model.schedule requires 0 < beta_start <= beta_end < 1".into());
        }
    }
}

/// Parameters updated when training adapters: both adapters and the
/// query, image-key and image-value projections of every decoupled layer.
pub fn is_adapter_trainable(key: &str) -> bool {
    key.starts_with(LAYOUT_PREFIX)
        || key.starts_with(APP_PREFIX)
        || key.contains(".to_q.")
        || key.contains(".to_k_img.")
        || key.contains(".to_v_img.")
}

/// Parameters trained with the text-only base model. The image-path
/// projections stay at zero so the base ignores visual prompts.
pub fn is_base_trainable(key: &str) -> bool {
    (key.starts_with(UNET_PREFIX) || key.starts_with(TEXT_PREFIX))
        && !key.contains(".to_k_img.")
        && !key.contains(".to_v_img.")
}

/// Module groups whose checksums must never change during adapter
/// training.
pub fn frozen_groups() -> [(&'static str, fn(&str) -> bool); 4] {
    [
        ("enc_coarse", |k| k.starts_with(COARSE_PREFIX)),
        ("enc_fine", |k| k.starts_with(FINE_PREFIX)),
        ("text", |k| k.starts_with(TEXT_PREFIX)),
        ("unet", |k| k.starts_with(UNET_PREFIX) && !is_adapter_trainable(k)),
    ]
}

/// Parameters plus the fixed schedule.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
}

/// Conditioning of one image in a denoiser batch.
#[derive(Debug, Clone, Default)]
pub struct SampleCond<'a> {
    pub caption: &'a [u32],
    pub bundle: Option<&'a PromptTokenBundle>,
    pub overrides: Option<&'a MaskOverride>,
}

struct Forward<'a> {
    p: &'a ParamStore,
    cfg: &'a DenoiserConfig,
    text: Tensor,
    cond: Vec<Conditioning<'a>>,
    records: Vec<AttentionRecord>,
}

impl Forward<'_> {
    fn res_block(&self, key: &str, x: &Tensor, temb: &Tensor, c_out: usize) -> Tensor {
        let c_in = x.dim(1);
        let h = params::group_norm(self.p, &format!("{key}.norm1"), x, group_count(c_in)).silu();
        let h = params::conv(self.p, &format!("{key}.conv1"), &h, Conv2dOpts::same(3));
        let shift = params::linear(self.p, &format!("{key}.temb"), temb).reshape(&[x.dim(0), c_out, 1, 1]);
        let h = h.add(&shift);
        let h = params::group_norm(self.p, &format!("{key}.norm2"), &h, group_count(c_out)).silu();
        let h = params::conv(self.p, &format!("{key}.conv2"), &h, Conv2dOpts::same(3));
        let skip = if c_in == c_out {
            x.clone()
        } else {
            params::conv(self.p, &format!("{key}.skip"), x, Conv2dOpts::default())
        };
        skip.add(&h)
    }

    fn attn_block(&mut self, key: &str, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let normed = params::group_norm(self.p, &format!("{key}.norm"), x, group_count(c));
        let seq = normed.reshape(&[b, c, h * w]).permute(&[0, 2, 1]);
        let att = AttentionParams {
            store: self.p,
            prefix: key,
            heads: self.cfg.head_count,
        };
        let (out, entries) = attention::kv_mixed_xattn(&att, &seq, &self.text, &self.cond, h)?;
        for (rec, e) in self.records.iter_mut().zip(entries) {
            if let Some(e) = e {
                rec.per_layer.push(e);
            }
        }
        Ok(x.add(&out.permute(&[0, 2, 1]).reshape(&[b, c, h, w])))
    }
}

impl Model {
    /// Fresh model: seeded encoders, adapters, caption encoder and UNet.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let mut errors = Vec::new();
        cfg.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let mut p = ParamStore::new();
        encoders::init_encoders(&mut p, &cfg.encoders);
        adapters::init_adapters(&mut p, &cfg.encoders, &cfg.adapters, cfg.denoiser.token_width, cfg.init_seed);
        init_denoiser(&mut p, &cfg.denoiser, cfg.init_seed);
        Ok(Self {
            cfg: cfg.clone(),
            schedule: NoiseSchedule::new(&cfg.schedule)?,
            params: p,
        })
    }

    pub fn with_params(&self, params: ParamStore) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params,
            schedule: self.schedule.clone(),
        }
    }

    pub fn frozen_checksums(&self) -> Vec<(String, String)> {
        frozen_groups()
            .into_iter()
            .map(|(name, pred)| (name.to_string(), self.params.checksum(pred)))
            .collect()
    }

    pub fn bundle(&self, set: &sprite_world::VisualPromptSet, mix: EncoderMix) -> Result<PromptTokenBundle> {
        adapters::bundle_prompts(&self.params, &self.cfg.encoders, &self.cfg.adapters, set, mix)
    }

    /// Noise prediction for `z_t` `(B, 3, H, W)` at per-element timesteps,
    /// with one attention record per element.
    pub fn denoise(&self, z_t: &Tensor, t: &[usize], cond: &[SampleCond<'_>]) -> Result<(Tensor, Vec<AttentionRecord>)> {
        denoiser_forward(&self.params, &self.cfg.denoiser, &self.schedule, z_t, t, cond)
    }
}

fn init_denoiser(p: &mut ParamStore, cfg: &DenoiserConfig, seed: u64) {
    let mut init = Init::new(p, rng_for(seed, &[0x0e7]));
    let d = cfg.token_width;
    init.normal(&format!("{TEXT_PREFIX}embed"), &[cfg.vocab_size, d], 1.0);
    init.norm(&format!("{TEXT_PREFIX}norm"), d);

    let ch = cfg.channels();
    let c0 = ch[0];
    let temb = 4 * c0;
    init.linear(&format!("{UNET_PREFIX}time1"), c0, temb, true);
    init.linear(&format!("{UNET_PREFIX}time2"), temb, temb, true);
    init.conv(&format!("{UNET_PREFIX}conv_in"), 3, c0, 3);

    let res_block = |init: &mut Init<'_>, key: &str, c_in: usize, c_out: usize| {
        init.norm(&format!("{key}.norm1"), c_in);
        init.conv(&format!("{key}.conv1"), c_in, c_out, 3);
        init.linear(&format!("{key}.temb"), temb, c_out, true);
        init.norm(&format!("{key}.norm2"), c_out);
        init.conv(&format!("{key}.conv2"), c_out, c_out, 3);
        if c_in != c_out {
            init.conv(&format!("{key}.skip"), c_in, c_out, 1);
        }
    };
    let attn_block = |init: &mut Init<'_>, key: &str, c: usize| {
        init.norm(&format!("{key}.norm"), c);
        attention::init_attention(init, key, c, d);
    };

    let mut c_prev = c0;
    let levels = ch.len();
    for (l, &c) in ch.iter().enumerate() {
        let key = format!("{UNET_PREFIX}down{l}");
        res_block(&mut init, &format!("{key}.res"), c_prev, c);
        if cfg.attention_resolutions.contains(&cfg.level_resolution(l)) {
            attn_block(&mut init, &format!("{key}.attn"), c);
        }
        if l + 1 < levels {
            init.conv(&format!("{key}.down"), c, c, 3);
        }
        c_prev = c;
    }
    let c_mid = ch[levels - 1];
    res_block(&mut init, &format!("{UNET_PREFIX}mid.res0"), c_mid, c_mid);
    if cfg.attention_resolutions.contains(&cfg.level_resolution(levels - 1)) {
        attn_block(&mut init, &format!("{UNET_PREFIX}mid.attn"), c_mid);
    }
    res_block(&mut init, &format!("{UNET_PREFIX}mid.res1"), c_mid, c_mid);
    let mut c_cur = c_mid;
    for l in (0..levels).rev() {
        let key = format!("{UNET_PREFIX}up{l}");
        res_block(&mut init, &format!("{key}.res"), c_cur + ch[l], ch[l]);
        if cfg.attention_resolutions.contains(&cfg.level_resolution(l)) {
            attn_block(&mut init, &format!("{key}.attn"), ch[l]);
        }
        c_cur = ch[l];
    }
    init.norm(&format!("{UNET_PREFIX}norm_out"), c0);
    init.conv(&format!("{UNET_PREFIX}conv_out"), c0, 3, 3);
    init.constant(&format!("{UNET_PREFIX}conv_out.weight"), &[3, c0, 3, 3], 0.0);
}

/// Pads or truncates captions to the model's fixed length.
pub fn pad_caption(tokens: &[u32], len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().take(len).map(|&t| t as usize).collect();
    ids.resize(len, PAD_TOKEN as usize);
    ids
}

/// `(B, Lt, D)` caption tokens.
pub fn encode_captions(p: &ParamStore, cfg: &DenoiserConfig, captions: &[&[u32]]) -> Result<Tensor> {
    let len = cfg.max_caption_len;
    let mut ids = Vec::with_capacity(captions.len() * len);
    for c in captions {
        if let Some(bad) = c.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Invalid(format!("caption token {bad} outside vocabulary")));
        }
        ids.extend(pad_caption(c, len));
    }
    let emb = Tensor::embedding(p.get(&format!("{TEXT_PREFIX}embed")), &ids, &[captions.len(), len]);
    let pos: Vec<f32> = (0..len).map(|i| i as f32).collect();
    let x = emb.add(&sinusoidal(&pos, cfg.token_width));
    Ok(params::layer_norm(p, &format!("{TEXT_PREFIX}norm"), &x))
}

pub fn denoiser_forward(
    p: &ParamStore,
    cfg: &DenoiserConfig,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    t: &[usize],
    cond: &[SampleCond<'_>],
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let s = z_t.shape();
    let b = s[0];
    if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::Shape(format!(
            "denoiser expects (B, 3, {0}, {0}), got {s:?}",
            cfg.image_size
        )));
    }
    if t.len() != b || cond.len() != b {
        return Err(Error::Shape(format!(
            "batch {b} with {} timesteps and {} conditionings",
            t.len(),
            cond.len()
        )));
    }
    for &ti in t {
        schedule.alpha_bar(ti)?;
    }
    let captions: Vec<&[u32]> = cond.iter().map(|c| c.caption).collect();
    let text = encode_captions(p, cfg, &captions)?;
    let mut f = Forward {
        p,
        cfg,
        text,
        cond: cond
            .iter()
            .map(|c| Conditioning {
                bundle: c.bundle,
                overrides: c.overrides,
            })
            .collect(),
        records: cond
            .iter()
            .map(|c| AttentionRecord {
                per_layer: Vec::new(),
                overrides: c.overrides.cloned(),
            })
            .collect(),
    };

    let ch = cfg.channels();
    let tf: Vec<f32> = t.iter().map(|&v| v as f32).collect();
    let temb = params::linear(p, &format!("{UNET_PREFIX}time1"), &sinusoidal(&tf, ch[0])).silu();
    let temb = params::linear(p, &format!("{UNET_PREFIX}time2"), &temb).silu();

    let mut x = params::conv(p, &format!("{UNET_PREFIX}conv_in"), z_t, Conv2dOpts::same(3));
    let levels = ch.len();
    let mut skips = Vec::with_capacity(levels);
    for (l, &c) in ch.iter().enumerate() {
        let key = format!("{UNET_PREFIX}down{l}");
        x = f.res_block(&format!("{key}.res"), &x, &temb, c);
        if cfg.attention_resolutions.contains(&cfg.level_resolution(l)) {
            x = f.attn_block(&format!("{key}.attn"), &x)?;
        }
        skips.push(x.clone());
        if l + 1 < levels {
            x = params::conv(
                p,
                &format!("{key}.down"),
                &x,
                Conv2dOpts {
                    stride: 2,
                    padding: 1,
                    ..Conv2dOpts::default()
                },
            );
        }
    }
    let c_mid = ch[levels - 1];
    x = f.res_block(&format!("{UNET_PREFIX}mid.res0"), &x, &temb, c_mid);
    if cfg.attention_resolutions.contains(&cfg.level_resolution(levels - 1)) {
        x = f.attn_block(&format!("{UNET_PREFIX}mid.attn"), &x)?;
    }
    x = f.res_block(&format!("{UNET_PREFIX}mid.res1"), &x, &temb, c_mid);
    for l in (0..levels).rev() {
        let key = format!("{UNET_PREFIX}up{l}");
        x = Tensor::concat(&[x, skips[l].clone()], 1);
        x = f.res_block(&format!("{key}.res"), &x, &temb, ch[l]);
        if cfg.attention_resolutions.contains(&cfg.level_resolution(l)) {
            x = f.attn_block(&format!("{key}.attn"), &x)?;
        }
        if l > 0 {
            x = x.upsample2();
        }
    }
    let x = params::group_norm(p, &format!("{UNET_PREFIX}norm_out"), &x, group_count(ch[0])).silu();
    let eps = params::conv(p, &format!("{UNET_PREFIX}conv_out"), &x, Conv2dOpts::same(3));
    Ok((eps, f.records))
}

/// Called before each denoising step of the conditional branch; may
/// return replacement tokens for that step and the following ones.
pub trait TokenRefiner {
    fn refine(
        &mut self,
        model: &Model,
        step_index: usize,
        t: usize,
        z_t: &Tensor,
        bundle: &PromptTokenBundle,
    ) -> Result<Option<PromptTokenBundle>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            cfg_scale: 7.5,
        }
    }
}

/// Result of one sampling run.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: ImageGrid,
    /// Conditional-branch record of the last denoising step.
    pub record: AttentionRecord,
    /// Tokens in use at the last step.
    pub bundle: Option<PromptTokenBundle>,
}

/// Initial noise for `seed`, `(1, 3, S, S)`.
pub fn initial_noise(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(data, &[1, 3, size, size])
}

/// Deterministic DDIM sampling with classifier-free guidance. The
/// unconditional branch has an empty caption and no visual prompts.
#[allow(clippy::too_many_arguments)]
pub fn sample_loop(
    model: &Model,
    bundle: Option<&PromptTokenBundle>,
    caption: &[u32],
    seed: u64,
    sampler: &SamplerConfig,
    overrides: Option<&MaskOverride>,
    mut refiner: Option<&mut dyn TokenRefiner>,
) -> Result<SampleOutput> {
    if let Some(ov) = overrides {
        ov.validate()?;
    }
    let size = model.cfg.denoiser.image_size;
    let p = model.params.detached();
    let mut z = initial_noise(seed, size);
    let mut current = bundle.map(|b| b.detached());
    let steps = model.schedule.ddim_timesteps(sampler.steps);
    let mut record = AttentionRecord::default();
    let null: [u32; 0] = [];
    for (i, &t) in steps.iter().enumerate() {
        if let (Some(r), Some(b)) = (refiner.as_deref_mut(), current.as_ref()) {
            if let Some(nb) = r.refine(model, i, t, &z, b)? {
                current = Some(nb.detached());
            }
        }
        let cond = SampleCond {
            caption,
            bundle: current.as_ref(),
            overrides,
        };
        let eps = if sampler.cfg_scale == 1.0 {
            let (eps, mut recs) = denoiser_forward(&p, &model.cfg.denoiser, &model.schedule, &z, &[t], &[cond])?;
            record = recs.remove(0);
            eps
        } else {
            let uncond = SampleCond {
                caption: &null,
                bundle: None,
                overrides: None,
            };
            let zz = Tensor::concat(&[z.clone(), z.clone()], 0);
            let (eps, mut recs) =
                denoiser_forward(&p, &model.cfg.denoiser, &model.schedule, &zz, &[t, t], &[uncond, cond])?;
            record = recs.remove(1);
            diffusion::cfg_combine(&eps.narrow(0, 0, 1), &eps.narrow(0, 1, 1), sampler.cfg_scale)
        };
        let t_prev = steps.get(i + 1).copied();
        z = diffusion::ddim_step(&model.schedule, &z, t, t_prev, &eps)?;
    }
    Ok(SampleOutput {
        image: ImageGrid::from_model_tensor(&z, 0),
        record,
        bundle: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprite_world::{extract_visual_prompts, generate_scene, SceneSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            denoiser: DenoiserConfig {
                base_channels: 8,
                ..DenoiserConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn set() -> sprite_world::VisualPromptSet {
        let s = generate_scene(&SceneSpec {
            canvas_size: 32,
            rng_seed: 1,
            ..SceneSpec::default()
        })
        .unwrap();
        extract_visual_prompts(&s, 32).unwrap()
    }

    #[test]
    fn zero_image_path_matches_text_only() {
        let mut m = Model::init(&tiny()).unwrap();
        // Make the base output non-trivial.
        let w = m.params.get("unet.conv_out.weight").numel();
        m.params
            .replace("unet.conv_out.weight", (0..w).map(|i| (i as f32 * 0.37).sin() * 0.1).collect())
            .unwrap();
        let set = set();
        let bundle = m.bundle(&set, EncoderMix::Mixed).unwrap();
        let z = initial_noise(3, 32);
        let cap = [1u32, 5, 14];
        let (a, _) = m
            .denoise(&z, &[500], &[SampleCond { caption: &cap, bundle: None, overrides: None }])
            .unwrap();
        let (b, rec) = m
            .denoise(&z, &[500], &[SampleCond { caption: &cap, bundle: Some(&bundle), overrides: None }])
            .unwrap();
        assert_eq!(a.shape(), z.shape());
        assert_eq!(a.data(), b.data());
        assert_eq!(rec[0].per_layer.len(), 5);
    }

    #[test]
    fn forward_is_reproducible() {
        let m = Model::init(&tiny()).unwrap();
        let z = initial_noise(4, 32);
        let c = SampleCond::default();
        let (a, _) = m.denoise(&z, &[10], &[c.clone()]).unwrap();
        let (b, _) = m.denoise(&z, &[10], &[c]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn trainable_split() {
        assert!(is_adapter_trainable("unet.down1.attn.to_q.weight"));
        assert!(is_adapter_trainable("adapter_app.latents"));
        assert!(!is_adapter_trainable("unet.down1.attn.to_k.weight"));
        assert!(!is_adapter_trainable("unet.down1.attn.to_out.weight"));
        assert!(is_base_trainable("unet.down1.attn.to_k.weight"));
        assert!(!is_base_trainable("unet.down1.attn.to_v_img.weight"));
        assert!(!is_base_trainable("enc_fine.conv0.weight"));
    }

    #[test]
    fn bad_shape_rejected() {
        let m = Model::init(&tiny()).unwrap();
        let z = Tensor::zeros(&[1, 3, 16, 16]);
        assert!(matches!(m.denoise(&z, &[0], &[SampleCond::default()]), Err(Error::Shape(_))));
        let z = initial_noise(0, 32);
        assert!(matches!(m.denoise(&z, &[1000], &[SampleCond::default()]), Err(Error::Timestep { .. })));
    }
}
