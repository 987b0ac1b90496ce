use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvmix::adapters::EncoderMix;
use kvmix::attention::{shift_prompt_attention, MaskOverride};
use kvmix::checkpoint::{Checkpoint, Stage};
use kvmix::config::{parse_config_with, RunConfig};
use kvmix::eval::{self, ablation_suite, evaluate_variant};
use kvmix::guidance::{guided_sample, GuidedOutput, Shift};
use kvmix::image::MaskGrid;
use kvmix::model::{sample_loop, Model};
use kvmix::sprite_world::{self, build_eval_set, VisualPromptSet};
use kvmix::trainer::{fit, model_from_checkpoint, Dataset, FitOptions, FINAL_CHECKPOINT};
use kvmix::Error;
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "kvmix", version, about = "Object-level visual prompt composition on synthetic scenes")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Configuration override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training split and the evaluation prompt sets.
    GenData(GenDataArgs),
    /// Train the text-only base model.
    PretrainBase(PretrainArgs),
    /// Train prompt adapters on the frozen base model.
    TrainAdapters(TrainAdaptersArgs),
    /// Sample one evaluation input, optionally with compositional guidance.
    Sample(SampleArgs),
    /// Score one checkpoint on the evaluation prompt sets.
    Eval(EvalArgs),
    /// Compare encoder variants, and guidance on the mixed model.
    Ablate(AblateArgs),
    /// Print the resolved configuration or every validation error.
    ValidateConfig,
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of training scenes (default from `scene.train_count`).
    #[arg(long)]
    count: Option<usize>,
    /// Number of evaluation prompt sets (default from `eval.count`).
    #[arg(long)]
    eval_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainAdaptersArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Base checkpoint from pretrain-base.
    #[arg(long)]
    base: Option<PathBuf>,
    /// mixed, coarse-only or fine-only.
    #[arg(long, default_value = "mixed")]
    variant: String,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SamplerFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f32>,
    #[arg(long)]
    refine_steps: Option<usize>,
    #[arg(long)]
    refine_lr: Option<f32>,
    #[arg(long)]
    refine_start: Option<f32>,
    #[arg(long)]
    refine_end: Option<f32>,
    #[arg(long)]
    mask_dilation: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// Adapter checkpoint; defaults to the mixed variant of this run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation split directory written by gen-data.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Index of the prompt set within the split.
    #[arg(long, default_value_t = 0)]
    input: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// Directory holding one `prompt{n}.png` allowed-region mask per prompt.
    #[arg(long)]
    mask_override: Option<PathBuf>,
    /// Move one prompt's region, `prompt:dx,dy` with a 0-based prompt index.
    #[arg(long)]
    shift: Option<String>,
    /// Two-stage sampling with segment matching and token refinement.
    #[arg(long)]
    guided: bool,
    /// Write the final-step attention maps as `attention.npz`.
    #[arg(long)]
    save_attention: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    guided: bool,
    /// Limit the number of evaluation inputs.
    #[arg(long)]
    limit: Option<usize>,
    /// Save every generated image.
    #[arg(long)]
    save_images: bool,
    #[command(flatten)]
    sampler: SamplerFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory with `<variant>/final.ckpt` for each variant.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    no_guidance: bool,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let text = match &g.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = parse_config_with(&text, &g.overrides)?;
    if let Some(o) = &g.output_dir {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_sampler_flags(cfg: &mut RunConfig, f: &SamplerFlags) -> CliResult<()> {
    if let Some(v) = f.steps {
        cfg.sampler.steps = v;
    }
    if let Some(v) = f.cfg_scale {
        cfg.sampler.cfg_scale = v;
    }
    if let Some(v) = f.refine_steps {
        cfg.guidance.refine_steps_per_t = v;
    }
    if let Some(v) = f.refine_lr {
        cfg.guidance.refine_lr = v;
    }
    if let Some(v) = f.refine_start {
        cfg.guidance.refine_start = v;
    }
    if let Some(v) = f.refine_end {
        cfg.guidance.refine_end = v;
    }
    if let Some(v) = f.mask_dilation {
        cfg.guidance.mask_dilation = v;
    }
    let errors = cfg.errors();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errors).into())
    }
}

fn parse_shift(s: &str) -> CliResult<Shift> {
    let bad = || CliError::Usage(format!("--shift expects `prompt:dx,dy`, got `{s}`"));
    let (p, d) = s.split_once(':').ok_or_else(bad)?;
    let (dx, dy) = d.split_once(',').ok_or_else(bad)?;
    Ok(Shift {
        prompt: p.trim().parse().map_err(|_| bad())?,
        dx: dx.trim().trim_start_matches('+').parse().map_err(|_| bad())?,
        dy: dy.trim().trim_start_matches('+').parse().map_err(|_| bad())?,
    })
}

fn data_dir(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.command_dir("gen-data"))
}

fn load_model(path: &Path, cfg: &RunConfig) -> CliResult<(Model, Checkpoint)> {
    let ck = Checkpoint::load(path, Some(&cfg.model))?;
    Ok((model_from_checkpoint(&ck)?, ck))
}

fn load_eval_sets(cfg: &RunConfig, explicit: &Option<PathBuf>, limit: Option<usize>) -> CliResult<Vec<VisualPromptSet>> {
    let dir = explicit.clone().unwrap_or_else(|| data_dir(cfg, &None).join("eval"));
    let mut sets = sprite_world::read_eval_split(&dir)?;
    if let Some(n) = limit {
        sets.truncate(n);
    }
    if sets.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(sets)
}

fn default_adapter_checkpoint(cfg: &RunConfig, mix: EncoderMix) -> PathBuf {
    cfg.command_dir("train-adapters").join(mix.label()).join(FINAL_CHECKPOINT)
}

fn gen_data(cfg: &RunConfig, a: &GenDataArgs) -> CliResult<()> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let out = cfg.command_dir("gen-data");
    cfg.write_snapshot(&out)?;
    let dist = cfg.scene.distribution();
    let count = a.count.unwrap_or(cfg.scene.train_count);
    let samples = dist.generate(count, seed)?;
    let train = sprite_world::write_training_split(&out.join("train"), "train", seed, &samples)?;
    let counts = cfg.eval.prompt_counts.iter().copied().collect();
    let eval_count = a.eval_count.unwrap_or(cfg.eval.count);
    let sets = build_eval_set(eval_count, &counts, seed ^ 0x5eed_e7a1, &dist, cfg.model.encoders.resolution)?;
    let eval = sprite_world::write_eval_split(&out.join("eval"), seed, &sets)?;
    println!("{}", train.display());
    println!("{}", eval.display());
    Ok(())
}

fn run_fit(cfg: &RunConfig, base: &Model, data: &Dataset, stage: Stage, mix: EncoderMix, out: PathBuf, resume: Option<PathBuf>) -> CliResult<()> {
    let opts = FitOptions {
        stage,
        mix,
        out_dir: out.clone(),
        seed: cfg.seed,
        resume,
        stop_at: None,
    };
    let ck = fit(base, data, &cfg.trainer, &opts)?;
    info!("finished at step {}", ck.step);
    println!("{}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn pretrain(cfg: &mut RunConfig, a: &PretrainArgs) -> CliResult<()> {
    if let Some(s) = a.steps {
        cfg.trainer.pretrain_steps = s;
    }
    let out = cfg.command_dir("pretrain-base");
    cfg.write_snapshot(&out)?;
    let samples = sprite_world::read_training_split(&data_dir(cfg, &a.data).join("train"))?;
    let model = Model::init(&cfg.model)?;
    let data = Dataset::new(&model, samples, false)?;
    run_fit(cfg, &model, &data, Stage::Base, EncoderMix::Mixed, out, a.resume.clone())
}

fn train_adapters(cfg: &mut RunConfig, a: &TrainAdaptersArgs) -> CliResult<()> {
    let mix = EncoderMix::parse(&a.variant)
        .ok_or_else(|| CliError::Usage(format!("unknown variant `{}` (mixed, coarse-only, fine-only)", a.variant)))?;
    if let Some(s) = a.steps {
        cfg.trainer.total_steps = s;
    }
    let out = cfg.command_dir("train-adapters").join(mix.label());
    cfg.write_snapshot(&out)?;
    let base_path = a
        .base
        .clone()
        .unwrap_or_else(|| cfg.command_dir("pretrain-base").join(FINAL_CHECKPOINT));
    let (base, ck) = load_model(&base_path, cfg)?;
    if ck.stage != Stage::Base {
        return Err(CliError::Core(Error::Checkpoint(format!("{} is not a base checkpoint", base_path.display()))));
    }
    let samples = sprite_world::read_training_split(&data_dir(cfg, &a.data).join("train"))?;
    let data = Dataset::new(&base, samples, true)?;
    run_fit(cfg, &base, &data, Stage::Adapters, mix, out, a.resume.clone())
}

/// Objects allowed on their source regions, background elsewhere.
fn override_from_sources(set: &VisualPromptSet, size: usize) -> CliResult<MaskOverride> {
    let mut masks = Vec::with_capacity(set.len());
    let mut covered = MaskGrid::empty(size, size);
    for p in set.objects() {
        let m = p
            .source_mask
            .as_ref()
            .ok_or_else(|| CliError::Usage("prompt set has no source masks; pass --mask-override".into()))?
            .resize_nearest(size, size);
        covered = covered.union(&m);
        masks.push(m);
    }
    masks.push(covered.complement());
    Ok(MaskOverride::new(masks))
}

fn read_override(dir: &Path, n: usize, size: usize) -> CliResult<MaskOverride> {
    let masks = (0..n)
        .map(|k| MaskGrid::load_png(&dir.join(format!("prompt{k}.png"))).map(|m| m.resize_nearest(size, size)))
        .collect::<kvmix::Result<Vec<_>>>()?;
    Ok(MaskOverride::new(masks))
}

#[derive(Serialize)]
struct AssignmentFile<'a> {
    input: usize,
    seed: u64,
    guided: bool,
    sigma: &'a BTreeMap<usize, usize>,
    pairs: &'a [kvmix::guidance::MatchedPair],
    total_cost: f32,
    unmatched_prompts: &'a [usize],
    segments: Vec<[usize; 5]>,
    shift: Option<Shift>,
    identity_loss_history: &'a [f32],
}

fn sample(cfg: &mut RunConfig, a: &SampleArgs) -> CliResult<()> {
    apply_sampler_flags(cfg, &a.sampler)?;
    let shift = a.shift.as_deref().map(parse_shift).transpose()?;
    let out = cfg.command_dir("sample");
    cfg.write_snapshot(&out)?;
    let ck_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| default_adapter_checkpoint(cfg, EncoderMix::Mixed));
    let (model, ck) = load_model(&ck_path, cfg)?;
    let mix = ck.mix.unwrap_or(EncoderMix::Mixed);
    let sets = load_eval_sets(cfg, &a.prompts, None)?;
    let set = sets
        .get(a.input)
        .ok_or_else(|| CliError::Usage(format!("input {} out of range ({} sets)", a.input, sets.len())))?;
    let caption = set.caption().unwrap_or_default();
    let size = cfg.model.denoiser.image_size;
    if a.guided {
        if a.mask_override.is_some() {
            return Err(CliError::Usage("--mask-override and --guided are exclusive".into()));
        }
        let g: GuidedOutput = guided_sample(&model, set, &caption, a.seed, &cfg.sampler, &cfg.guidance, mix, shift)?;
        g.stage1.image.save_png(&out.join("stage1.png"))?;
        g.image.save_png(&out.join("stage2.png"))?;
        let file = AssignmentFile {
            input: a.input,
            seed: a.seed,
            guided: g.guided,
            sigma: &g.assignment.sigma,
            pairs: &g.assignment.pairs,
            total_cost: g.assignment.total_cost,
            unmatched_prompts: &g.assignment.unmatched_prompts,
            segments: g
                .segments
                .iter()
                .map(|s| [s.bbox.y0, s.bbox.x0, s.bbox.y1, s.bbox.x1, s.area])
                .collect(),
            shift,
            identity_loss_history: &g.identity_history,
        };
        fs::write(out.join("assignment.json"), serde_json::to_vec_pretty(&file)?)?;
        if let Some(ov) = &g.overrides {
            for (k, m) in ov.per_prompt_allowed.iter().enumerate() {
                m.save_png(&out.join(format!("override_prompt{k}.png")))?;
            }
        }
        if a.save_attention {
            let rec = g.stage2.as_ref().map_or(&g.stage1.record, |s| &s.record);
            rec.export_npz(&out.join("attention.npz"))?;
        }
        println!("{}", out.join("stage2.png").display());
    } else {
        let mut ov = match &a.mask_override {
            Some(dir) => Some(read_override(dir, set.len(), size)?),
            None => None,
        };
        if let Some(s) = shift {
            let base = match ov.take() {
                Some(o) => o,
                None => override_from_sources(set, size)?,
            };
            ov = Some(shift_prompt_attention(&base, s.prompt, s.dx, s.dy)?);
        }
        let bundle = model.bundle(set, mix)?;
        let res = sample_loop(&model, Some(&bundle), &caption, a.seed, &cfg.sampler, ov.as_ref(), None)?;
        res.image.save_png(&out.join("sample.png"))?;
        if let Some(o) = &ov {
            for (k, m) in o.per_prompt_allowed.iter().enumerate() {
                m.save_png(&out.join(format!("override_prompt{k}.png")))?;
            }
        }
        if a.save_attention {
            res.record.export_npz(&out.join("attention.npz"))?;
        }
        println!("{}", out.join("sample.png").display());
    }
    Ok(())
}

fn eval_cmd(cfg: &mut RunConfig, a: &EvalArgs) -> CliResult<()> {
    apply_sampler_flags(cfg, &a.sampler)?;
    let out = cfg.command_dir("eval");
    cfg.write_snapshot(&out)?;
    let ck_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| default_adapter_checkpoint(cfg, EncoderMix::Mixed));
    let (model, ck) = load_model(&ck_path, cfg)?;
    let mix = ck.mix.unwrap_or(EncoderMix::Mixed);
    let sets = load_eval_sets(cfg, &a.prompts, a.limit)?;
    let img_dir = out.join("images");
    if a.save_images {
        fs::create_dir_all(&img_dir)?;
    }
    let report = evaluate_variant(&model, &sets, mix, a.guided, &cfg.sampler, &cfg.guidance, &cfg.eval, |i, r, img| {
        if a.save_images {
            img.save_png(&img_dir.join(format!("{i:03}_{r}.png")))?;
        }
        Ok(())
    })?;
    let reports = [report];
    eval::write_report_csv(&out.join("report.csv"), &reports)?;
    eval::write_summary_csv(&out.join("summary.csv"), &reports)?;
    fs::write(out.join("summary.md"), eval::markdown_table(&reports))?;
    print!("{}", eval::markdown_table(&reports));
    Ok(())
}

fn ablate(cfg: &mut RunConfig, a: &AblateArgs) -> CliResult<()> {
    apply_sampler_flags(cfg, &a.sampler)?;
    let out = cfg.command_dir("ablate");
    cfg.write_snapshot(&out)?;
    let root = a.checkpoints.clone().unwrap_or_else(|| cfg.command_dir("train-adapters"));
    let mut models = BTreeMap::new();
    for mix in [EncoderMix::CoarseOnly, EncoderMix::FineOnly, EncoderMix::Mixed] {
        let path = root.join(mix.label()).join(FINAL_CHECKPOINT);
        if !path.exists() {
            return Err(Error::MissingVariant(format!("{} ({})", mix.label(), path.display())).into());
        }
        models.insert(mix, load_model(&path, cfg)?.0);
    }
    let sets = load_eval_sets(cfg, &a.prompts, a.limit)?;
    let reports = ablation_suite(&models, &sets, !a.no_guidance, &cfg.sampler, &cfg.guidance, &cfg.eval, &out)?;
    print!("{}", eval::markdown_table(&reports));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::PretrainBase(a) => pretrain(&mut cfg, a),
        Command::TrainAdapters(a) => train_adapters(&mut cfg, a),
        Command::Sample(a) => sample(&mut cfg, a),
        Command::Eval(a) => eval_cmd(&mut cfg, a),
        Command::Ablate(a) => ablate(&mut cfg, a),
        Command::ValidateConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_parsing() {
        let s = parse_shift("1:+4,0").ok().unwrap();
        assert_eq!((s.prompt, s.dx, s.dy), (1, 4, 0));
        let s = parse_shift("0:-3,+2").ok().unwrap();
        assert_eq!((s.prompt, s.dx, s.dy), (0, -3, 2));
        assert!(parse_shift("1:4").is_err());
    }
}
