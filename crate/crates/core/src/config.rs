//! Run configuration: one TOML file with strict keys and aggregated
//! validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::guidance::GuidanceConfig;
use crate::model::{ModelConfig, SamplerConfig};
use crate::sprite_world::{BackgroundKind, PaletteColor, SceneDistribution, ShapeKind};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_kinds: Vec<ShapeKind>,
    pub palette: Vec<PaletteColor>,
    pub background_kinds: Vec<BackgroundKind>,
    pub train_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let d = SceneDistribution::default();
        Self {
            canvas_size: 32,
            min_objects: d.min_objects,
            max_objects: d.max_objects,
            object_kinds: d.object_kinds,
            palette: d.palette,
            background_kinds: d.background_kinds,
            train_count: 2000,
        }
    }
}

impl SceneConfig {
    pub fn distribution(&self) -> SceneDistribution {
        SceneDistribution {
            canvas_size: self.canvas_size,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            object_kinds: self.object_kinds.clone(),
            palette: self.palette.clone(),
            background_kinds: self.background_kinds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every constraint violation, each naming its key.
    pub fn errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        let s = &self.scene;
        if s.min_objects < 2 || s.min_objects > s.max_objects || s.max_objects > 5 {
            e.push(format!(
                "scene.min_objects and scene.max_objects need 2 <= min <= max <= 5 (got {} and {})",
                s.min_objects, s.max_objects
            ));
        }
        if s.object_kinds.is_empty() {
            e.push("scene.object_kinds must be non-empty".into());
        }
        if s.palette.is_empty() {
            e.push("scene.palette must be non-empty".into());
        }
        if s.background_kinds.is_empty() {
            e.push("scene.background_kinds must be non-empty".into());
        }
        if s.train_count == 0 {
            e.push("scene.train_count > 0 is required".into());
        }
        if s.canvas_size != self.model.denoiser.image_size {
            e.push(format!(
                "scene.canvas_size must equal model.denoiser.image_size (got {} and {})",
                s.canvas_size, self.model.denoiser.image_size
            ));
        }
        self.model.validate(&mut e);
        self.trainer.validate(&mut e, "trainer");
        if self.sampler.steps == 0 || self.sampler.steps > self.model.schedule.steps {
            e.push(format!(
                "sampler.steps must lie in [1, model.schedule.steps] (got {})",
                self.sampler.steps
            ));
        }
        if !self.sampler.cfg_scale.is_finite() || self.sampler.cfg_scale < 0.0 {
            e.push("sampler.cfg_scale must be finite and >= 0".into());
        }
        self.guidance.validate(&mut e, "guidance");
        self.eval.validate(&mut e, "eval");
        e
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn command_dir(&self, command: &str) -> PathBuf {
        self.output_dir.join(command)
    }

    /// Writes the resolved configuration next to a command's artifacts.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved.toml");
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }
}

fn unknown_keys(user: &toml::Value, reference: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(u), toml::Value::Table(r)) = (user, reference) {
        for (k, v) in u {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rv) => unknown_keys(v, rv, &path, out),
                None => out.push(format!("{path}: unknown key")),
            }
        }
    }
}

/// Parses TOML text into a resolved configuration, reporting all problems
/// at once.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, &[])
}

fn set_override(root: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` must look like section.key=value"))?;
    let key = key.trim();
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{part}` is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// As [`parse_config`], with `section.key=value` overrides applied on top.
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table = toml::from_str::<toml::Table>(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
    let mut errors = Vec::new();
    for o in overrides {
        if let Err(e) = set_override(&mut table, o) {
            errors.push(e);
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let user = toml::Value::Table(table);
    let reference = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut errors = Vec::new();
    unknown_keys(&user, &reference, "", &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let cfg: RunConfig = user
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(vec![format!("type error: {e}")]))?;
    let errors = cfg.errors();
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}

/// Reads and validates a configuration file.
pub fn validate_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}
