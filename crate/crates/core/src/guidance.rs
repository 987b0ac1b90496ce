//! Two-stage compositional guidance: sample once, find the generated
//! objects, assign prompts to them, then resample from the same noise with
//! per-prompt attention regions and appearance-token refinement.

use std::collections::BTreeMap;

use kvmix_tensor::Tensor;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::adapters::{EncoderMix, PromptTokenBundle};
use crate::attention::{shift_prompt_attention, MaskOverride};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::image::{BBox, ImageGrid, MaskGrid};
use crate::metric::{cosine_sim, metric_features, metric_features_tensor, MetricFeature};
use crate::model::{denoiser_forward, sample_loop, Model, SampleCond, SampleOutput, SamplerConfig, TokenRefiner};
use crate::sprite_world::VisualPromptSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub refine_steps_per_t: usize,
    pub refine_lr: f32,
    /// Refinement runs on DDIM steps whose index fraction lies in
    /// `[refine_start, refine_end)`; 0 is the noisiest step.
    pub refine_start: f32,
    pub refine_end: f32,
    /// Pixels by which every region of the stage-2 override is grown.
    pub mask_dilation: usize,
    /// Per-channel colour distance above which a pixel is foreground.
    pub segment_threshold: f32,
    pub min_segment_area: usize,
    /// Window radius for matching pixels against the background prompt.
    pub background_search_radius: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            refine_steps_per_t: 1,
            refine_lr: 0.05,
            refine_start: 0.4,
            refine_end: 1.0,
            mask_dilation: 1,
            segment_threshold: 0.12,
            min_segment_area: 16,
            background_search_radius: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, errors: &mut Vec<String>, section: &str) {
        if !(self.refine_lr > 0.0) {
            errors.push(format!("{section}.refine_lr > 0 is required (got {})", self.refine_lr));
        }
        if !(0.0 <= self.refine_start && self.refine_start <= self.refine_end && self.refine_end <= 1.0) {
            errors.push(format!(
                "{section}.refine_start and {section}.refine_end need 0 <= start <= end <= 1"
            ));
        }
        if !(self.segment_threshold > 0.0) {
            errors.push(format!("{section}.segment_threshold > 0 is required"));
        }
        if self.min_segment_area == 0 {
            errors.push(format!("{section}.min_segment_area > 0 is required"));
        }
    }

    fn refines_at(&self, step_index: usize, steps: usize) -> bool {
        let f = step_index as f32 / steps.max(1) as f32;
        self.refine_steps_per_t > 0 && f >= self.refine_start && f < self.refine_end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub mask: MaskGrid,
    pub bbox: BBox,
    pub area: usize,
}

/// Foreground pixels: those with no pixel of the background reference
/// within `radius` whose colour is closer than the threshold.
fn foreground(image: &ImageGrid, background: &ImageGrid, threshold: f32, radius: usize) -> MaskGrid {
    let (h, w) = (image.height, image.width);
    let mut fg = MaskGrid::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let c = image.get(y, x);
            let mut hit = false;
            'search: for by in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                for bx in x.saturating_sub(radius)..(x + radius + 1).min(w) {
                    let b = background.get(by, bx);
                    let d = (0..3).map(|k| (c[k] - b[k]).abs()).fold(0.0f32, f32::max);
                    if d < threshold {
                        hit = true;
                        break 'search;
                    }
                }
            }
            if !hit {
                fg.set(y, x, true);
            }
        }
    }
    fg
}

/// Share of border pixels set in `mask`.
fn border_fraction(mask: &MaskGrid) -> f32 {
    let (h, w) = (mask.height, mask.width);
    let (mut set, mut total) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                total += 1;
                set += mask.get(y, x) as usize;
            }
        }
    }
    set as f32 / total.max(1) as f32
}

fn border_median(image: &ImageGrid) -> [f32; 3] {
    let (h, w) = (image.height, image.width);
    let mut chans = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                let c = image.get(y, x);
                for k in 0..3 {
                    chans[k].push(c[k]);
                }
            }
        }
    }
    chans.map(|mut v| {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    })
}

/// 4-connected components of `mask`, in raster order of their first pixel.
pub fn connected_components(mask: &MaskGrid) -> Vec<MaskGrid> {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = MaskGrid::empty(h, w);
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            comp.data[i] = true;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.data[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Candidate objects: background subtraction against `background` (or
/// the image's border colour), then connected components of at least
/// `min_segment_area` pixels, largest first.
pub fn segment_candidates(image: &ImageGrid, background: Option<&ImageGrid>, cfg: &GuidanceConfig) -> Result<Vec<Segment>> {
    let (h, w) = (image.height, image.width);
    let flat = || foreground(image, &ImageGrid::filled(h, w, border_median(image)), cfg.segment_threshold, cfg.background_search_radius);
    let fg = match background {
        Some(b) => {
            let b = if (b.height, b.width) == (h, w) { b.clone() } else { b.resize_nearest(h, w) };
            let fg = foreground(image, &b, cfg.segment_threshold, cfg.background_search_radius);
            // A background that misses most of the border does not describe
            // this image; fall back to its own border colour.
            if border_fraction(&fg) > 0.5 {
                flat()
            } else {
                fg
            }
        }
        None => flat(),
    };
    let mut segs: Vec<Segment> = connected_components(&fg)
        .into_iter()
        .filter(|m| m.area() >= cfg.min_segment_area)
        .map(|mask| Segment {
            bbox: mask.bbox().expect("non-empty component"),
            area: mask.area(),
            mask,
        })
        .collect();
    segs.sort_by(|a, b| b.area.cmp(&a.area).then((a.bbox.y0, a.bbox.x0).cmp(&(b.bbox.y0, b.bbox.x0))));
    Ok(segs)
}

fn solve_square(cost: &[Vec<f64>], forced: &[(usize, usize)]) -> (Vec<usize>, f64) {
    // Rows <= columns; forced pairs pin rows to columns.
    let n = cost.len();
    let m = cost[0].len();
    // Large enough that no assignment through a blocked cell can win.
    let big = 2.0 * (n + 1) as f64 * (cost.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0);
    let c = |i: usize, j: usize| -> f64 {
        for &(fi, fj) in forced {
            if fi == i && fj != j {
                return big;
            }
            if fj == j && fi != i {
                return big;
            }
        }
        cost[i][j]
    };
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = j - 1;
        }
    }
    let total = rows.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (rows, total)
}

/// Minimum-cost one-to-one assignment on a rectangular matrix. Returns
/// `min(R, C)` `(row, col)` pairs sorted by row and the total cost. Among
/// optimal assignments the lexicographically smallest is chosen.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<(usize, usize)>, f64)> {
    let r = cost.len();
    if r == 0 || cost[0].is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let c = cost[0].len();
    if cost.iter().any(|row| row.len() != c) {
        return Err(Error::Shape("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("cost matrix must be finite".into()));
    }
    let transposed = r > c;
    let m: Vec<Vec<f64>> = if transposed {
        (0..c).map(|j| (0..r).map(|i| cost[i][j]).collect()).collect()
    } else {
        cost.to_vec()
    };
    let (_, best) = solve_square(&m, &[]);
    let scale = m.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-9 * scale * m.len() as f64;
    // Fix pairs greedily in lexicographic order while staying optimal.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if transposed {
        // Rows of the original are columns here; walk them in order.
        let mut taken = vec![false; m.len()];
        for orig_row in 0..r {
            if pairs.len() == c {
                break;
            }
            let mut fixed = None;
            for (k, _) in taken.iter().enumerate().filter(|(_, t)| !**t) {
                let mut forced: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
                forced.push((k, orig_row));
                let (_, total) = solve_square(&m, &forced);
                if total <= best + tol {
                    fixed = Some(k);
                    break;
                }
            }
            if let Some(k) = fixed {
                taken[k] = true;
                pairs.push((orig_row, k));
            }
        }
    } else {
        for i in 0..r {
            for j in 0..c {
                if pairs.iter().any(|&(_, pj)| pj == j) {
                    continue;
                }
                let mut forced = pairs.clone();
                forced.push((i, j));
                let (_, total) = solve_square(&m, &forced);
                if total <= best + tol {
                    pairs.push((i, j));
                    break;
                }
            }
        }
    }
    let total = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok((pairs, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub prompt: usize,
    pub segment: usize,
    pub similarity: f32,
    pub cost: f32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    /// Object-prompt index to segment index.
    pub sigma: BTreeMap<usize, usize>,
    pub pairs: Vec<MatchedPair>,
    pub total_cost: f32,
    pub unmatched_prompts: Vec<usize>,
}

impl Assignment {
    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.sigma.values().all(|j| seen.insert(*j))
    }
}

/// Descriptor of each object prompt over its own mask.
pub fn prompt_features(set: &VisualPromptSet) -> Result<Vec<MetricFeature>> {
    set.objects()
        .map(|p| metric_features(&p.pixels, p.prompt_mask.as_ref()))
        .collect()
}

/// Optimal prompt-to-segment assignment on `1 - similarity`.
pub fn match_prompts(set: &VisualPromptSet, segments: &[Segment], image: &ImageGrid) -> Result<Assignment> {
    let pf = prompt_features(set)?;
    let sf: Vec<MetricFeature> = segments
        .iter()
        .map(|s| metric_features(image, Some(&s.mask)))
        .collect::<Result<_>>()?;
    let sims: Vec<Vec<f32>> = pf.iter().map(|p| sf.iter().map(|s| cosine_sim(p, s)).collect()).collect();
    let cost: Vec<Vec<f64>> = sims.iter().map(|r| r.iter().map(|&s| 1.0 - s as f64).collect()).collect();
    let (pairs, total) = hungarian(&cost)?;
    let mut a = Assignment {
        total_cost: total as f32,
        ..Assignment::default()
    };
    for &(n, j) in &pairs {
        a.sigma.insert(n, j);
        a.pairs.push(MatchedPair {
            prompt: n,
            segment: j,
            similarity: sims[n][j],
            cost: cost[n][j] as f32,
        });
    }
    a.unmatched_prompts = (0..pf.len()).filter(|n| !a.sigma.contains_key(n)).collect();
    Ok(a)
}

/// `sum (1 - Sim)` over matched pairs, differentiable in `x0`, a
/// `(1, 3, H, W)` image in `[-1, 1]`.
pub fn identity_loss(
    prompt_feats: &[MetricFeature],
    assignment: &Assignment,
    segments: &[Segment],
    x0: &Tensor,
) -> Result<Tensor> {
    let (h, w) = (x0.dim(2), x0.dim(3));
    let pixels = x0.affine(0.5, 0.5).reshape(&[3, h, w]);
    let mut total: Option<Tensor> = None;
    for pair in &assignment.pairs {
        let seg = segments
            .get(pair.segment)
            .ok_or_else(|| Error::Invalid(format!("segment {} out of range", pair.segment)))?;
        let f = metric_features_tensor(&pixels, &seg.mask)?;
        let target = Tensor::from_vec(prompt_feats[pair.prompt].0.clone(), &[f.numel()]);
        let term = f.mul(&target).sum_all().affine(-1.0, 1.0);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

/// One descent step on the appearance tokens. Layout tokens are kept as
/// is; non-finite gradients skip the step.
pub fn refine_appearance_tokens(bundle: &PromptTokenBundle, grad: &[f32], lr: f32) -> Result<PromptTokenBundle> {
    if grad.len() != bundle.appearance.numel() {
        return Err(Error::Shape(format!(
            "gradient of {} values for {} appearance entries",
            grad.len(),
            bundle.appearance.numel()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        warn!("non-finite appearance gradient; refinement step skipped");
        return Ok(bundle.clone());
    }
    let data: Vec<f32> = bundle.appearance.data().iter().zip(grad).map(|(a, g)| a - lr * g).collect();
    bundle.with_appearance(Tensor::from_vec(data, bundle.appearance.shape()))
}

/// Stage-2 override: matched prompts inside their grown segment, the
/// background prompt on the grown complement of all matched segments,
/// unmatched prompts everywhere.
pub fn build_override(num_prompts: usize, assignment: &Assignment, segments: &[Segment], size: usize, dilation: usize) -> MaskOverride {
    let mut masks = vec![MaskGrid::full(size, size); num_prompts];
    let mut covered = MaskGrid::empty(size, size);
    for (&n, &j) in &assignment.sigma {
        let m = segments[j].mask.resize_nearest(size, size);
        covered = covered.union(&m);
        masks[n] = m.dilate(dilation);
    }
    if let Some(bg) = masks.last_mut() {
        *bg = covered.complement().dilate(dilation);
    }
    MaskOverride::new(masks)
}

/// Appearance-token refinement driven by the identity loss on x̂0.
pub struct IdentityRefiner<'a> {
    pub cfg: &'a GuidanceConfig,
    pub caption: &'a [u32],
    pub overrides: Option<&'a MaskOverride>,
    pub prompt_feats: Vec<MetricFeature>,
    pub assignment: &'a Assignment,
    pub segments: &'a [Segment],
    pub steps: usize,
    /// Identity loss before each refinement update.
    pub history: Vec<f32>,
}

impl TokenRefiner for IdentityRefiner<'_> {
    fn refine(
        &mut self,
        model: &Model,
        step_index: usize,
        t: usize,
        z_t: &Tensor,
        bundle: &PromptTokenBundle,
    ) -> Result<Option<PromptTokenBundle>> {
        if !self.cfg.refines_at(step_index, self.steps) || self.assignment.pairs.is_empty() {
            return Ok(None);
        }
        let p = model.params.detached();
        let mut current = bundle.clone();
        for _ in 0..self.cfg.refine_steps_per_t {
            let app = current.appearance.detach().to_var();
            let b = current.with_appearance(app.clone())?;
            let cond = SampleCond {
                caption: self.caption,
                bundle: Some(&b),
                overrides: self.overrides,
            };
            let (eps, _) = denoiser_forward(&p, &model.cfg.denoiser, &model.schedule, z_t, &[t], &[cond])?;
            let x0 = diffusion::predict_x0(&model.schedule, z_t, t, &eps)?;
            let loss = identity_loss(&self.prompt_feats, self.assignment, self.segments, &x0)?;
            self.history.push(loss.item());
            let grads = loss.backward();
            let g = grads.get(&app).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; app.numel()]);
            current = refine_appearance_tokens(&current.detached(), &g, self.cfg.refine_lr)?;
        }
        Ok(Some(current))
    }
}

#[derive(Debug, Clone)]
pub struct GuidedOutput {
    pub image: ImageGrid,
    pub stage1: SampleOutput,
    pub stage2: Option<SampleOutput>,
    pub assignment: Assignment,
    pub segments: Vec<Segment>,
    pub overrides: Option<MaskOverride>,
    /// Tokens the sampler started from, shared by both stages.
    pub initial_bundle: PromptTokenBundle,
    pub guided: bool,
    pub identity_history: Vec<f32>,
}

impl GuidedOutput {
    /// Whether the second stage kept the first stage's layout tokens bit for
    /// bit. Trivially true when no second stage ran.
    pub fn layout_preserved(&self) -> bool {
        let initial = self.initial_bundle.layout.data();
        let same = |s: &SampleOutput| s.bundle.as_ref().is_none_or(|b| b.layout.data() == initial);
        same(&self.stage1) && self.stage2.as_ref().is_none_or(same)
    }
}

/// Prompt-relocation request applied to the stage-2 override.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shift {
    pub prompt: usize,
    pub dx: i32,
    pub dy: i32,
}

#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    model: &Model,
    set: &VisualPromptSet,
    caption: &[u32],
    seed: u64,
    sampler: &SamplerConfig,
    cfg: &GuidanceConfig,
    mix: EncoderMix,
    shift: Option<Shift>,
) -> Result<GuidedOutput> {
    set.validate()?;
    let bundle = model.bundle(set, mix)?.detached();
    let stage1 = sample_loop(model, Some(&bundle), caption, seed, sampler, None, None)?;
    let segments = segment_candidates(&stage1.image, set.background().map(|b| &b.pixels), cfg)?;
    if segments.is_empty() {
        warn!("no segments in the first-stage image; returning it unguided");
        return Ok(GuidedOutput {
            image: stage1.image.clone(),
            stage1,
            stage2: None,
            assignment: Assignment {
                unmatched_prompts: (0..set.num_objects()).collect(),
                ..Assignment::default()
            },
            segments,
            overrides: None,
            initial_bundle: bundle,
            guided: false,
            identity_history: Vec::new(),
        });
    }
    let assignment = match_prompts(set, &segments, &stage1.image)?;
    let size = model.cfg.denoiser.image_size;
    let mut ov = build_override(set.len(), &assignment, &segments, size, cfg.mask_dilation);
    if let Some(s) = shift {
        ov = shift_prompt_attention(&ov, s.prompt, s.dx, s.dy)?;
    }
    let mut refiner = IdentityRefiner {
        cfg,
        caption,
        overrides: Some(&ov),
        prompt_feats: prompt_features(set)?,
        assignment: &assignment,
        segments: &segments,
        steps: sampler.steps,
        history: Vec::new(),
    };
    let stage2 = sample_loop(model, Some(&bundle), caption, seed, sampler, Some(&ov), Some(&mut refiner))?;
    let history = refiner.history;
    Ok(GuidedOutput {
        image: stage2.image.clone(),
        stage1,
        stage2: Some(stage2),
        assignment,
        segments,
        overrides: Some(ov),
        initial_bundle: bundle,
        guided: true,
        identity_history: history,
    })
}
