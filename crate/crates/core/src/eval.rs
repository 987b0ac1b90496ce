//! Compositional identity, layout diversity and the encoder ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapters::EncoderMix;
use crate::encoders::{fine_activations, EncoderConfig};
use crate::error::{Error, Result};
use crate::guidance::{guided_sample, match_prompts, segment_candidates, Assignment, GuidanceConfig};
use crate::image::ImageGrid;
use crate::model::{sample_loop, Model, SamplerConfig};
use crate::params::ParamStore;
use crate::seeds::derive_seed;
use crate::sprite_world::VisualPromptSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub count: usize,
    pub seeds_per_input: usize,
    pub prompt_counts: Vec<usize>,
    /// Base seed of the sampling noise; each input and repeat derives its own.
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 50,
            seeds_per_input: 5,
            prompt_counts: vec![3, 4, 5],
            sample_seed: 7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, errors: &mut Vec<String>, section: &str) {
        if self.count == 0 {
            errors.push(format!("{section}.count > 0 is required"));
        }
        if self.seeds_per_input < 2 {
            errors.push(format!("{section}.seeds_per_input >= 2 is required for diversity"));
        }
        if self.prompt_counts.is_empty() || self.prompt_counts.iter().any(|n| !(3..=5).contains(n)) {
            errors.push(format!("{section}.prompt_counts must be a non-empty subset of [3, 4, 5]"));
        }
    }

    pub fn seed_for(&self, input: usize, repeat: usize) -> u64 {
        derive_seed(self.sample_seed, &[input as u64, repeat as u64])
    }
}

/// Mean similarity over object prompts, unmatched prompts counting 0.
pub fn compositional_identity(set: &VisualPromptSet, image: &ImageGrid, cfg: &GuidanceConfig) -> Result<(f32, Assignment)> {
    let n = set.num_objects();
    let segments = segment_candidates(image, set.background().map(|b| &b.pixels), cfg)?;
    if segments.is_empty() || n == 0 {
        return Ok((
            0.0,
            Assignment {
                unmatched_prompts: (0..n).collect(),
                ..Assignment::default()
            },
        ));
    }
    let a = match_prompts(set, &segments, image)?;
    let score = a.pairs.iter().map(|p| p.similarity).sum::<f32>() / n as f32;
    Ok((score, a))
}

/// Multi-scale perceptual distance between two images: unit-normalized
/// fine-encoder activations compared per position, averaged over layers
/// and scales 1, 1/2 and 1/4.
pub fn perceptual_distance(p: &ParamStore, enc: &EncoderConfig, a: &ImageGrid, b: &ImageGrid) -> Result<f32> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape("images differ in size".into()));
    }
    let mut total = 0.0f64;
    let mut terms = 0usize;
    for scale in [1usize, 2, 4] {
        let (h, w) = (a.height / scale, a.width / scale);
        if h < 4 || w < 4 {
            continue;
        }
        let x = crate::Tensor::concat(&[a.resize(h, w).to_model_tensor(), b.resize(h, w).to_model_tensor()], 0);
        for act in fine_activations(p, enc, &x) {
            let (c, hw) = (act.dim(1), act.dim(2) * act.dim(3));
            let d = act.data();
            let mut layer = 0.0f64;
            for pos in 0..hw {
                let norm = |img: usize| {
                    (0..c)
                        .map(|k| (d[img * c * hw + k * hw + pos] as f64).powi(2))
                        .sum::<f64>()
                        .sqrt()
                        + 1e-10
                };
                let (na, nb) = (norm(0), norm(1));
                layer += (0..c)
                    .map(|k| (d[k * hw + pos] as f64 / na - d[c * hw + k * hw + pos] as f64 / nb).powi(2))
                    .sum::<f64>();
            }
            total += layer / hw as f64;
            terms += 1;
        }
    }
    Ok((total / terms.max(1) as f64) as f32)
}

/// Mean pairwise perceptual distance.
pub fn diversity_score(p: &ParamStore, enc: &EncoderConfig, images: &[ImageGrid]) -> Result<f32> {
    if images.len() < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 images, got {}", images.len())));
    }
    let mut sum = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            sum += perceptual_distance(p, enc, &images[i], &images[j])? as f64;
            pairs += 1;
        }
    }
    Ok((sum / pairs as f64) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputResult {
    pub input_id: usize,
    pub identity: f32,
    pub diversity: f32,
    pub n_prompts: usize,
    /// Unmatched object prompts summed over repeats.
    pub n_unmatched: usize,
    /// Total matching cost averaged over repeats.
    pub total_cost: f32,
    pub per_seed_identity: Vec<f32>,
    /// Prompt-to-segment maps (scoring, and guidance when on) that were not
    /// injective, over all repeats.
    #[serde(default)]
    pub non_injective: usize,
    /// Guided repeats whose second stage ran with different layout tokens.
    #[serde(default)]
    pub layout_changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub per_input: Vec<InputResult>,
    pub mean_identity: f32,
    pub mean_diversity: f32,
}

impl EvalReport {
    fn from_inputs(variant: String, per_input: Vec<InputResult>) -> Self {
        let n = per_input.len().max(1) as f32;
        Self {
            mean_identity: per_input.iter().map(|r| r.identity).sum::<f32>() / n,
            mean_diversity: per_input.iter().map(|r| r.diversity).sum::<f32>() / n,
            variant,
            per_input,
        }
    }
}

pub fn variant_label(mix: EncoderMix, guided: bool) -> String {
    if guided {
        format!("{}+guidance", mix.label())
    } else {
        mix.label().to_string()
    }
}

/// Samples every input `seeds_per_input` times and scores the outputs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_variant(
    model: &Model,
    sets: &[VisualPromptSet],
    mix: EncoderMix,
    guided: bool,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    cfg: &EvalConfig,
    mut on_image: impl FnMut(usize, usize, &ImageGrid) -> Result<()>,
) -> Result<EvalReport> {
    let label = variant_label(mix, guided);
    let mut rows = Vec::with_capacity(sets.len());
    for (id, set) in sets.iter().enumerate() {
        let caption = set.caption().unwrap_or_default();
        let mut images = Vec::with_capacity(cfg.seeds_per_input);
        let mut ids = Vec::with_capacity(cfg.seeds_per_input);
        let mut unmatched = 0;
        let mut cost = 0.0;
        let (mut non_injective, mut layout_changed) = (0, 0);
        for r in 0..cfg.seeds_per_input {
            let seed = cfg.seed_for(id, r);
            let image = if guided {
                let g = guided_sample(model, set, &caption, seed, sampler, guidance, mix, None)?;
                non_injective += usize::from(!g.assignment.is_injective());
                layout_changed += usize::from(!g.layout_preserved());
                g.image
            } else {
                let bundle = model.bundle(set, mix)?;
                sample_loop(model, Some(&bundle), &caption, seed, sampler, None, None)?.image
            };
            let (score, a) = compositional_identity(set, &image, guidance)?;
            non_injective += usize::from(!a.is_injective());
            ids.push(score);
            unmatched += a.unmatched_prompts.len();
            cost += a.total_cost;
            on_image(id, r, &image)?;
            images.push(image);
        }
        let diversity = diversity_score(&model.params, &model.cfg.encoders, &images)?;
        let row = InputResult {
            input_id: id,
            identity: ids.iter().sum::<f32>() / ids.len() as f32,
            diversity,
            n_prompts: set.len(),
            n_unmatched: unmatched,
            total_cost: cost / cfg.seeds_per_input as f32,
            per_seed_identity: ids,
            non_injective,
            layout_changed,
        };
        info!("{label} input {id}: identity {:.3} diversity {:.4}", row.identity, row.diversity);
        rows.push(row);
    }
    Ok(EvalReport::from_inputs(label, rows))
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    input_id: usize,
    variant: &'a str,
    identity: f32,
    diversity: f32,
    n_prompts: usize,
    n_unmatched: usize,
}

/// Per-input CSV rows for every report.
pub fn write_report_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in reports {
        for row in &r.per_input {
            w.serialize(ReportRow {
                input_id: row.input_id,
                variant: &r.variant,
                identity: row.identity,
                diversity: row.diversity,
                n_prompts: row.n_prompts,
                n_unmatched: row.n_unmatched,
            })
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    variant: &'a str,
    identity: f32,
    diversity: f32,
    inputs: usize,
    unmatched: usize,
    non_injective: usize,
    layout_changed: usize,
}

/// One row per variant with the mean scores.
pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in reports {
        w.serialize(SummaryRow {
            variant: &r.variant,
            identity: r.mean_identity,
            diversity: r.mean_diversity,
            inputs: r.per_input.len(),
            unmatched: r.per_input.iter().map(|x| x.n_unmatched).sum(),
            non_injective: r.per_input.iter().map(|x| x.non_injective).sum(),
            layout_changed: r.per_input.iter().map(|x| x.layout_changed).sum(),
        })
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn markdown_table(reports: &[EvalReport]) -> String {
    let mut s = String::from("| Variant | Diversity | Identity | Inputs | Unmatched prompts |\n|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {} | {} |",
            r.variant,
            r.mean_diversity,
            r.mean_identity,
            r.per_input.len(),
            r.per_input.iter().map(|x| x.n_unmatched).sum::<usize>()
        );
    }
    s
}

/// Evaluates each encoder variant, plus guidance on the mixed model, and
/// writes `report.csv`, `summary.csv` and `summary.md` into `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn ablation_suite(
    models: &BTreeMap<EncoderMix, Model>,
    sets: &[VisualPromptSet],
    with_guidance: bool,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for mix in [EncoderMix::CoarseOnly, EncoderMix::FineOnly, EncoderMix::Mixed] {
        let model = models.get(&mix).ok_or_else(|| Error::MissingVariant(mix.label().into()))?;
        reports.push(evaluate_variant(model, sets, mix, false, sampler, guidance, cfg, |_, _, _| Ok(()))?);
    }
    if with_guidance {
        let model = &models[&EncoderMix::Mixed];
        reports.push(evaluate_variant(model, sets, EncoderMix::Mixed, true, sampler, guidance, cfg, |_, _, _| Ok(()))?);
    }
    fs::create_dir_all(out_dir)?;
    write_report_csv(&out_dir.join("report.csv"), &reports)?;
    write_summary_csv(&out_dir.join("summary.csv"), &reports)?;
    fs::write(out_dir.join("summary.md"), markdown_table(&reports))?;
    fs::write(out_dir.join("reports.json"), serde_json::to_vec_pretty(&reports)?)?;
    Ok(reports)
}
