//! Python bindings: scene generation, matching, losses, config checks and
//! sampling from a trained checkpoint.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use kvmix::adapters::EncoderMix;
use kvmix::checkpoint::Checkpoint;
use kvmix::diffusion::{NoiseSchedule, ScheduleConfig};
use kvmix::eval::compositional_identity;
use kvmix::guidance::{self, GuidanceConfig};
use kvmix::image::{ImageGrid, MaskGrid};
use kvmix::model::{sample_loop, SamplerConfig};
use kvmix::sprite_world::{self, SceneSpec};
use kvmix::trainer::{bounded_xa_loss, model_from_checkpoint};
use kvmix::{Error, Tensor};

type Rgb = Vec<Vec<[f32; 3]>>;

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(msgs) => PyValueError::new_err(msgs.join("\n")),
        Error::Io(_) | Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(img: &ImageGrid) -> Rgb {
    (0..img.height)
        .map(|y| (0..img.width).map(|x| img.get(y, x)).collect())
        .collect()
}

fn from_rows(rows: &Rgb) -> PyResult<ImageGrid> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty H x W x 3 nested list"));
    }
    let mut img = ImageGrid::filled(h, w, [0.0; 3]);
    for (y, r) in rows.iter().enumerate() {
        for (x, px) in r.iter().enumerate() {
            img.set(y, x, *px);
        }
    }
    Ok(img)
}

fn mask_rows(m: &MaskGrid) -> Vec<Vec<bool>> {
    (0..m.height).map(|y| (0..m.width).map(|x| m.get(y, x)).collect()).collect()
}

/// One synthetic scene as a dict with `image`, `masks`, `caption` and
/// `background`.
#[pyfunction]
#[pyo3(signature = (seed, num_objects=3, canvas_size=32))]
fn generate_scene(py: Python<'_>, seed: u64, num_objects: usize, canvas_size: usize) -> PyResult<Py<PyAny>> {
    let s = sprite_world::generate_scene(&SceneSpec {
        canvas_size,
        num_objects,
        rng_seed: seed,
        ..SceneSpec::default()
    })
    .map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("image", rows(&s.image))?;
    d.set_item("background", rows(&s.background))?;
    d.set_item("masks", s.masks.iter().map(mask_rows).collect::<Vec<_>>())?;
    d.set_item("caption", sprite_world::detokenize(&s.caption))?;
    Ok(d.into_any().unbind())
}

/// Minimum-cost assignment of a rectangular cost matrix: `(pairs, cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    guidance::hungarian(&cost).map_err(err)
}

/// Bounded cross-attention loss of `(N, L)` maps against `N` square masks.
#[pyfunction]
#[pyo3(signature = (maps, masks, alpha=1.0))]
fn xa_loss(maps: Vec<Vec<f32>>, masks: Vec<Vec<Vec<bool>>>, alpha: f32) -> PyResult<f32> {
    let n = maps.len();
    let l = maps.first().map_or(0, Vec::len);
    if maps.iter().any(|r| r.len() != l) {
        return Err(PyValueError::new_err("maps rows differ in length"));
    }
    let grids = masks
        .iter()
        .map(|m| {
            let mut g = MaskGrid::empty(m.len(), m.first().map_or(0, Vec::len));
            for (y, r) in m.iter().enumerate() {
                for (x, &v) in r.iter().enumerate() {
                    g.set(y, x, v);
                }
            }
            g
        })
        .collect::<Vec<_>>();
    let t = Tensor::from_vec(maps.into_iter().flatten().collect(), &[n, l]);
    Ok(bounded_xa_loss(&t, &grids, alpha).map_err(err)?.value.item())
}

/// Cumulative signal fraction per timestep for the default schedule.
#[pyfunction]
fn alpha_bars() -> PyResult<Vec<f64>> {
    Ok(NoiseSchedule::new(&ScheduleConfig::default()).map_err(err)?.alpha_bars)
}

/// Parses a config file; raises `ValueError` listing every problem.
#[pyfunction]
fn validate_config(path: PathBuf) -> PyResult<String> {
    Ok(kvmix::config::validate_config(&path).map_err(err)?.to_toml())
}

/// Stage, step, variant and parameter count of a checkpoint.
#[pyfunction]
fn checkpoint_info(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let ck = Checkpoint::load(&path, None).map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("stage", format!("{:?}", ck.stage).to_lowercase())?;
    d.set_item("step", ck.step)?;
    d.set_item("variant", ck.mix.map(|m| m.label()))?;
    d.set_item("tensors", ck.params.len())?;
    d.set_item("parameters", ck.params.count_params(""))?;
    Ok(d.into_any().unbind())
}

/// Samples eval input `input` from `eval_dir` with an adapter checkpoint and
/// returns `(image, identity)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, eval_dir, input=0, seed=0, steps=25, cfg_scale=7.5, guided=false))]
fn sample(
    checkpoint: PathBuf,
    eval_dir: PathBuf,
    input: usize,
    seed: u64,
    steps: usize,
    cfg_scale: f32,
    guided: bool,
) -> PyResult<(Rgb, f32)> {
    let ck = Checkpoint::load(&checkpoint, None).map_err(err)?;
    let mix = ck.mix.unwrap_or(EncoderMix::Mixed);
    let model = model_from_checkpoint(&ck).map_err(err)?;
    let sets = sprite_world::read_eval_split(&eval_dir).map_err(err)?;
    let set = sets
        .get(input)
        .ok_or_else(|| PyValueError::new_err(format!("input {input} out of {}", sets.len())))?;
    let sampler = SamplerConfig { steps, cfg_scale };
    let caption = set.caption().unwrap_or_default();
    let gcfg = GuidanceConfig::default();
    let image = if guided {
        guidance::guided_sample(&model, set, &caption, seed, &sampler, &gcfg, mix, None)
            .map_err(err)?
            .image
    } else {
        let bundle = model.bundle(set, mix).map_err(err)?;
        sample_loop(&model, Some(&bundle), &caption, seed, &sampler, None, None)
            .map_err(err)?
            .image
    };
    let (score, _) = compositional_identity(set, &image, &gcfg).map_err(err)?;
    Ok((rows(&image), score))
}

/// Compositional identity of an image against the prompts of the scene
/// `generate_scene(seed, num_objects, len(image))` would produce.
#[pyfunction]
fn scene_identity(seed: u64, num_objects: usize, image: Rgb) -> PyResult<f32> {
    let img = from_rows(&image)?;
    let s = sprite_world::generate_scene(&SceneSpec {
        canvas_size: img.height,
        num_objects,
        rng_seed: seed,
        ..SceneSpec::default()
    })
    .map_err(err)?;
    let set = sprite_world::extract_visual_prompts(&s, kvmix::encoders::EncoderConfig::default().resolution)
        .map_err(err)?;
    Ok(compositional_identity(&set, &img, &GuidanceConfig::default()).map_err(err)?.0)
}

#[pymodule]
fn kvmix_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(xa_loss, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bars, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(scene_identity, m)?)?;
    Ok(())
}
