//! Two-stage training: a text-only base model, then the prompt adapters
//! and image-path projections on top of it with the base frozen.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kvmix_tensor::Tensor;
use log::{info, warn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapters::{self, EncoderMix, PromptCodes, PromptTokenBundle};
use crate::checkpoint::{frozen_checksums, AdamState, Checkpoint, Stage};
use crate::error::{Error, Result};
use crate::image::MaskGrid;
use crate::model::{self, is_adapter_trainable, is_base_trainable, Model, SampleCond};
use crate::params::ParamStore;
use crate::seeds::rng_for;
use crate::sprite_world::{extract_visual_prompts, TrainingSample};

/// Per-sample conditioning dropout. The three outcomes are mutually
/// exclusive: caption only, prompts only, or both dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutRates {
    pub text: f64,
    pub visual: f64,
    pub both: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            text: 0.10,
            visual: 0.10,
            both: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DropDecision {
    pub text: bool,
    pub visual: bool,
}

impl DropoutRates {
    pub fn draw(&self, rng: &mut impl Rng) -> DropDecision {
        let u: f64 = rng.random();
        if u < self.both {
            DropDecision { text: true, visual: true }
        } else if u < self.both + self.text {
            DropDecision { text: true, visual: false }
        } else if u < self.both + self.text + self.visual {
            DropDecision { text: false, visual: true }
        } else {
            DropDecision::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Weight of attention mass outside an object's mask.
    pub alpha: f32,
    pub xa_loss_weight: f32,
    /// Scale each sample's attention loss by the signal level at its timestep.
    pub xa_timestep_weighting: bool,
    pub dropout: DropoutRates,
    pub pretrain_learning_rate: f32,
    pub pretrain_steps: u64,
    pub pretrain_text_dropout: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            total_steps: 10_000,
            alpha: 1.0,
            xa_loss_weight: 0.01,
            xa_timestep_weighting: false,
            dropout: DropoutRates::default(),
            pretrain_learning_rate: 1e-3,
            pretrain_steps: 6000,
            pretrain_text_dropout: 0.10,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, errors: &mut Vec<String>, section: &str) {
        let rate = |name: &str, v: f64, errors: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("{section}.{name} must lie in [0, 1] (got {v})"));
            }
        };
        rate("dropout.text", self.dropout.text, errors);
        rate("dropout.visual", self.dropout.visual, errors);
        rate("dropout.both", self.dropout.both, errors);
        rate("pretrain_text_dropout", self.pretrain_text_dropout, errors);
        if self.dropout.text + self.dropout.visual + self.dropout.both > 1.0 {
            errors.push(format!("{section}.dropout rates must sum to at most 1"));
        }
        if !(self.alpha > 0.0) {
            errors.push(format!("{section}.alpha > 0 is required (got {})", self.alpha));
        }
        if !(self.learning_rate > 0.0) {
            errors.push(format!("{section}.learning_rate > 0 is required"));
        }
        if !(self.pretrain_learning_rate > 0.0) {
            errors.push(format!("{section}.pretrain_learning_rate > 0 is required"));
        }
        if !(self.xa_loss_weight >= 0.0) {
            errors.push(format!("{section}.xa_loss_weight >= 0 is required"));
        }
        if self.batch_size == 0 {
            errors.push(format!("{section}.batch_size > 0 is required"));
        }
        if self.checkpoint_every == 0 {
            errors.push(format!("{section}.checkpoint_every > 0 is required"));
        }
        if self.log_every == 0 {
            errors.push(format!("{section}.log_every > 0 is required"));
        }
    }
}

/// Bounded attention loss over object prompts.
#[derive(Debug, Clone)]
pub struct XaLoss {
    pub value: Tensor,
    /// Terms with no attention mass at all, scored 1.
    pub absent: usize,
}

/// `maps` is `(N, L)` per-prompt attention over `L` query positions; only
/// the first `masks.len()` rows (the objects) contribute. Masks must be at
/// the map resolution.
pub fn bounded_xa_loss(maps: &Tensor, masks: &[MaskGrid], alpha: f32) -> Result<XaLoss> {
    let n = masks.len();
    if maps.rank() != 2 || maps.dim(0) < n {
        return Err(Error::Shape(format!("maps {:?} for {n} masks", maps.shape())));
    }
    let l = maps.dim(1);
    if n == 0 {
        return Ok(XaLoss {
            value: Tensor::scalar(0.0),
            absent: 0,
        });
    }
    let mut inside = Vec::with_capacity(n * l);
    for m in masks {
        if m.height * m.width != l {
            return Err(Error::Shape(format!(
                "mask {}x{} against {l} query positions",
                m.height, m.width
            )));
        }
        inside.extend(m.to_f32());
    }
    let obj = if maps.dim(0) == n { maps.clone() } else { maps.narrow(0, 0, n) };
    let m_in = Tensor::from_vec(inside, &[n, l]);
    let m_out = m_in.affine(-1.0, 1.0);
    let s_in = obj.mul(&m_in).sum_axis(1);
    let s_out = obj.mul(&m_out).sum_axis(1);
    let denom = s_in.add(&s_out.scale(alpha));
    let zero: Vec<f32> = denom.data().iter().map(|&d| if d > 0.0 { 0.0 } else { 1.0 }).collect();
    let absent = zero.iter().filter(|&&z| z > 0.0).count();
    if absent > 0 {
        warn!("{absent} object prompt(s) received no attention; scored as 1");
    }
    let denom = denom.add(&Tensor::from_vec(zero, &[n]));
    let value = s_in.div(&denom).affine(-1.0, 1.0).sum_all();
    Ok(XaLoss { value, absent })
}

/// Training sample with cached frozen-encoder outputs.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub sample: TrainingSample,
    pub codes: Option<PromptCodes>,
    /// Object masks max-pooled to the attention-loss resolution.
    pub xa_masks: Vec<MaskGrid>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<TrainItem>,
}

impl Dataset {
    /// Validates sizes and caches prompt codes when `with_prompts`.
    pub fn new(model: &Model, samples: Vec<TrainingSample>, with_prompts: bool) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cfg = &model.cfg;
        let size = cfg.denoiser.image_size;
        let frozen = model.params.detached();
        let items = samples
            .into_iter()
            .map(|s| {
                if s.image.height != size || s.image.width != size {
                    return Err(Error::Resolution {
                        expected: size,
                        height: s.image.height,
                        width: s.image.width,
                    });
                }
                let codes = if with_prompts {
                    let set = extract_visual_prompts(&s, cfg.encoders.resolution)?;
                    Some(adapters::encode_prompts(&frozen, &cfg.encoders, &set)?)
                } else {
                    None
                };
                let xa_masks = s.masks.iter().map(|m| m.max_pool_to(cfg.denoiser.xa_resolution)).collect();
                Ok(TrainItem {
                    sample: s,
                    codes,
                    xa_masks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Random draws of one step, derived from `(seed, step)` alone.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub indices: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub drops: Vec<DropDecision>,
    pub noise: Vec<f32>,
}

impl StepPlan {
    pub fn draw(seed: u64, step: u64, stage: Stage, data_len: usize, cfg: &TrainConfig, model: &Model) -> Self {
        let mut rng = rng_for(seed, &[0x7a11, step]);
        let b = cfg.batch_size;
        let size = model.cfg.denoiser.image_size;
        let indices = (0..b).map(|_| rng.random_range(0..data_len)).collect();
        let timesteps = (0..b).map(|_| rng.random_range(0..model.schedule.len())).collect();
        let drops = (0..b)
            .map(|_| match stage {
                Stage::Adapters => cfg.dropout.draw(&mut rng),
                Stage::Base => DropDecision {
                    text: rng.random::<f64>() < cfg.pretrain_text_dropout,
                    visual: true,
                },
            })
            .collect();
        let noise = (0..b * 3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            indices,
            timesteps,
            drops,
            noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepLosses {
    pub diffusion: f32,
    pub xa: f32,
    pub total: f32,
}

/// Mutable training state: the single writer of the parameters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub optim: AdamState,
    pub step: u64,
}

pub fn trainable(stage: Stage) -> fn(&str) -> bool {
    match stage {
        Stage::Base => is_base_trainable,
        Stage::Adapters => is_adapter_trainable,
    }
}

/// Losses and gradients of one batch without touching the parameters.
pub fn compute_losses(
    model: &Model,
    p: &ParamStore,
    data: &Dataset,
    plan: &StepPlan,
    cfg: &TrainConfig,
    mix: EncoderMix,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mcfg = &model.cfg;
    let b = plan.indices.len();
    let size = mcfg.denoiser.image_size;
    let items: Vec<&TrainItem> = plan.indices.iter().map(|&i| &data.items[i]).collect();
    let mut bundles: Vec<Option<PromptTokenBundle>> = Vec::with_capacity(b);
    for (item, drop) in items.iter().zip(&plan.drops) {
        bundles.push(match (&item.codes, drop.visual) {
            (Some(codes), false) => Some(adapters::bundle_from_codes(p, &mcfg.adapters, codes, mix)?),
            _ => None,
        });
    }
    let null: [u32; 0] = [];
    let conds: Vec<SampleCond<'_>> = items
        .iter()
        .zip(&plan.drops)
        .zip(&bundles)
        .map(|((item, drop), bundle)| SampleCond {
            caption: if drop.text { &null } else { &item.sample.caption },
            bundle: bundle.as_ref(),
            overrides: None,
        })
        .collect();
    let x0 = Tensor::concat(
        &items.iter().map(|it| it.sample.image.to_model_tensor()).collect::<Vec<_>>(),
        0,
    );
    let noise = Tensor::from_vec(plan.noise.clone(), &[b, 3, size, size]);
    let mut sa = Vec::with_capacity(b);
    let mut sn = Vec::with_capacity(b);
    for &t in &plan.timesteps {
        let ab = model.schedule.alpha_bar(t)?;
        sa.push(ab.sqrt() as f32);
        sn.push((1.0 - ab).sqrt() as f32);
    }
    let z = x0
        .mul(&Tensor::from_vec(sa, &[b, 1, 1, 1]))
        .add(&noise.mul(&Tensor::from_vec(sn, &[b, 1, 1, 1])));
    let (eps, records) = model::denoiser_forward(p, &mcfg.denoiser, &model.schedule, &z, &plan.timesteps, &conds)?;
    let diffusion = eps.sub(&noise).sqr().mean_all();

    let mut xa_terms = Vec::new();
    for ((rec, item), &t) in records.iter().zip(&items).zip(&plan.timesteps) {
        let entries: Vec<_> = rec.at_resolution(mcfg.denoiser.xa_resolution).collect();
        if entries.is_empty() {
            continue;
        }
        let mut acc: Option<Tensor> = None;
        for e in &entries {
            let l = bounded_xa_loss(&e.prompt_maps, &item.xa_masks, cfg.alpha)?.value;
            acc = Some(match acc {
                Some(a) => a.add(&l),
                None => l,
            });
        }
        let mut term = acc.expect("non-empty").scale(1.0 / entries.len() as f32);
        if cfg.xa_timestep_weighting {
            term = term.scale(model.schedule.alpha_bar(t)? as f32);
        }
        xa_terms.push(term);
    }
    let xa = if xa_terms.is_empty() {
        Tensor::scalar(0.0)
    } else {
        let k = xa_terms.len() as f32;
        Tensor::concat(&xa_terms.iter().map(|t| t.reshape(&[1])).collect::<Vec<_>>(), 0)
            .sum_all()
            .scale(1.0 / k)
    };
    let total = if cfg.xa_loss_weight == 0.0 {
        diffusion.clone()
    } else {
        diffusion.add(&xa.scale(cfg.xa_loss_weight))
    };
    Ok((diffusion, xa, total))
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    sample_seeds: Vec<u64>,
    indices: &'a [usize],
    timesteps: &'a [usize],
    text_dropped: Vec<bool>,
    visual_dropped: Vec<bool>,
    losses: StepLosses,
    non_finite_grads: &'a [String],
}

/// One optimizer step. Non-finite losses or gradients abort, before any
/// weight changes, with a dump of the batch written into `dump_dir`.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    data: &Dataset,
    plan: &StepPlan,
    cfg: &TrainConfig,
    stage: Stage,
    mix: EncoderMix,
    dump_dir: &Path,
) -> Result<StepLosses> {
    let pred = trainable(stage);
    let p = state.params.with_trainable(pred);
    let (diffusion, xa, total) = compute_losses(model, &p, data, plan, cfg, mix)?;
    let losses = StepLosses {
        diffusion: diffusion.item(),
        xa: xa.item(),
        total: total.item(),
    };
    let dump = |bad_params: &[String]| -> Result<PathBuf> {
        fs::create_dir_all(dump_dir)?;
        let path = dump_dir.join(format!("nan_dump_step{}.json", state.step));
        let dump = NanDump {
            step: state.step,
            sample_seeds: plan.indices.iter().map(|&i| data.items[i].sample.seed).collect(),
            indices: &plan.indices,
            timesteps: &plan.timesteps,
            text_dropped: plan.drops.iter().map(|d| d.text).collect(),
            visual_dropped: plan.drops.iter().map(|d| d.visual).collect(),
            losses,
            non_finite_grads: bad_params,
        };
        fs::write(&path, serde_json::to_vec_pretty(&dump)?)?;
        Ok(path)
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            dump: dump(&[])?,
        });
    }
    let grads = total.backward();
    let g = p.collect_grads(&grads, pred);
    let bad: Vec<String> = g
        .iter()
        .filter(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .map(|(k, _)| k.clone())
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteGradient {
            step: state.step,
            dump: dump(&bad)?,
            params: bad,
        });
    }
    state.optim.update(&mut state.params, &g)?;
    state.step += 1;
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub stage: Stage,
    pub mix: EncoderMix,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Continue from this checkpoint instead of the base weights.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps regardless of the configured total.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    step: u64,
    loss_diffusion: f32,
    loss_xa: f32,
    loss_total: f32,
    lr: f32,
    wall_time_s: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Trains `stage` from `base` (or from `opts.resume`) and writes periodic
/// checkpoints, the final checkpoint and a metrics CSV into `opts.out_dir`.
pub fn fit(base: &Model, data: &Dataset, cfg: &TrainConfig, opts: &FitOptions) -> Result<Checkpoint> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut errors = Vec::new();
    cfg.validate(&mut errors, "trainer");
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    fs::create_dir_all(&opts.out_dir)?;
    let (lr, total_steps) = match opts.stage {
        Stage::Base => (cfg.pretrain_learning_rate, cfg.pretrain_steps),
        Stage::Adapters => (cfg.learning_rate, cfg.total_steps),
    };
    let frozen = frozen_checksums(&base.params, opts.stage);
    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path, Some(&base.cfg))?;
            if ck.stage != opts.stage {
                return Err(Error::Checkpoint(format!("cannot resume {:?} training from a {:?} checkpoint", opts.stage, ck.stage)));
            }
            for (k, v) in &frozen {
                if ck.frozen_checksums.get(k) != Some(v) {
                    return Err(Error::FrozenChecksum {
                        module: k.clone(),
                        expected: v.clone(),
                        found: ck.frozen_checksums.get(k).cloned().unwrap_or_default(),
                    });
                }
            }
            TrainState {
                params: ck.params,
                optim: ck.optimizer.unwrap_or_else(|| AdamState::new(lr)),
                step: ck.step,
            }
        }
        None => TrainState {
            params: base.params.clone(),
            optim: AdamState::new(lr),
            step: 0,
        },
    };
    let train_cfg_json = serde_json::to_value(cfg)?;
    let snapshot = |state: &TrainState| Checkpoint {
        stage: opts.stage,
        step: state.step,
        mix: (opts.stage == Stage::Adapters).then_some(opts.mix),
        model_config: base.cfg.clone(),
        train_config: train_cfg_json.clone(),
        frozen_checksums: frozen.clone(),
        params: state.params.clone(),
        optimizer: Some(state.optim.clone()),
    };

    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let append = opts.resume.is_some() && metrics_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)?;
    let mut writer = csv::WriterBuilder::new().has_headers(!append).from_writer(file);

    let stop = opts.stop_at.map_or(total_steps, |s| s.min(total_steps));
    let start = Instant::now();
    let dump_dir = opts.out_dir.clone();
    while state.step < stop {
        let plan = StepPlan::draw(opts.seed, state.step, opts.stage, data.len(), cfg, base);
        let losses = train_step(base, &mut state, data, &plan, cfg, opts.stage, opts.mix, &dump_dir)?;
        if state.step % cfg.log_every == 0 || state.step == stop {
            writer
                .serialize(MetricsRow {
                    step: state.step,
                    loss_diffusion: losses.diffusion,
                    loss_xa: losses.xa,
                    loss_total: losses.total,
                    lr: state.optim.lr,
                    wall_time_s: start.elapsed().as_secs_f64(),
                })
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writer.flush()?;
            info!(
                "step {} diffusion {:.4} xa {:.4} total {:.4}",
                state.step, losses.diffusion, losses.xa, losses.total
            );
        }
        if state.step % cfg.checkpoint_every == 0 {
            snapshot(&state).save(&opts.out_dir.join(checkpoint_name(state.step)))?;
        }
    }
    writer.flush()?;
    let ck = snapshot(&state);
    ck.save(&opts.out_dir.join(FINAL_CHECKPOINT))?;
    Ok(ck)
}

/// Model restored from a checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<Model> {
    let m = Model::init(&ck.model_config)?;
    let mut params = ck.params.clone();
    // Older or partial checkpoints fall back to freshly initialized entries.
    for (k, t) in m.params.iter() {
        if !params.contains(k) {
            params.insert(k.clone(), t.clone());
        }
    }
    Ok(m.with_params(params))
}

/// Simulated dropout frequencies over `draws` samples: (text only, visual only, both).
pub fn dropout_frequencies(rates: &DropoutRates, draws: usize, seed: u64) -> (f64, f64, f64) {
    let mut rng = rng_for(seed, &[0xd209]);
    let mut counts = BTreeMap::<(bool, bool), usize>::new();
    for _ in 0..draws {
        let d = rates.draw(&mut rng);
        *counts.entry((d.text, d.visual)).or_default() += 1;
    }
    let f = |k| *counts.get(&k).unwrap_or(&0) as f64 / draws as f64;
    (f((true, false)), f((false, true)), f((true, true)))
}
