//! Procedural multi-object scenes with exact masks and backgrounds.
//!
//! Every scene is a pure function of its [`SceneSpec`]. Objects are bright
//! sprites with a random pose and surface pattern; backgrounds are dark,
//! muted textures, so object and background never share colours.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, ImageGrid, MaskGrid};
use crate::seeds::{derive_seed, rng_for};

pub const PLACEMENT_ATTEMPTS: usize = 100;
pub const PROMPT_MARGIN: usize = 2;
pub const PROMPT_FILL: [f32; 3] = [0.5, 0.5, 0.5];
pub const MIN_OBJECT_AREA: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Star,
        ShapeKind::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Inside test in the shape's local frame, unit radius.
    fn contains(self, x: f32, y: f32) -> bool {
        let r2 = x * x + y * y;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Ring => (0.3..=1.0).contains(&r2),
            ShapeKind::Square => x.abs() <= 0.78 && y.abs() <= 0.78,
            ShapeKind::Triangle => point_in_polygon(x, y, &regular_polygon(3, 1.0, 0.0, 0.0)),
            ShapeKind::Star => point_in_polygon(x, y, &star_polygon()),
        }
    }
}

fn regular_polygon(n: usize, r: f32, inner: f32, phase: f32) -> Vec<(f32, f32)> {
    let mut pts = Vec::new();
    let steps = if inner > 0.0 { 2 * n } else { n };
    for i in 0..steps {
        let a = phase - std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::TAU / steps as f32;
        let rad = if inner > 0.0 && i % 2 == 1 { inner } else { r };
        pts.push((rad * a.cos(), rad * a.sin()));
    }
    pts
}

fn star_polygon() -> Vec<(f32, f32)> {
    regular_polygon(5, 1.0, 0.5, 0.0)
}

fn point_in_polygon(x: f32, y: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
    Pink,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 9] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::Purple,
        PaletteColor::Orange,
        PaletteColor::Cyan,
        PaletteColor::White,
        PaletteColor::Pink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Purple => "purple",
            PaletteColor::Orange => "orange",
            PaletteColor::Cyan => "cyan",
            PaletteColor::White => "white",
            PaletteColor::Pink => "pink",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            PaletteColor::Red => [0.9, 0.15, 0.15],
            PaletteColor::Green => [0.2, 0.8, 0.25],
            PaletteColor::Blue => [0.2, 0.35, 0.95],
            PaletteColor::Yellow => [0.95, 0.9, 0.2],
            PaletteColor::Purple => [0.6, 0.25, 0.85],
            PaletteColor::Orange => [0.95, 0.55, 0.1],
            PaletteColor::Cyan => [0.2, 0.85, 0.9],
            PaletteColor::White => [0.95, 0.95, 0.95],
            PaletteColor::Pink => [0.95, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Checker,
    Noise,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] = [
        BackgroundKind::Solid,
        BackgroundKind::Gradient,
        BackgroundKind::Checker,
        BackgroundKind::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackgroundKind::Solid => "solid",
            BackgroundKind::Gradient => "gradient",
            BackgroundKind::Checker => "checker",
            BackgroundKind::Noise => "noise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Surface detail that the caption never mentions. It is what separates
/// two objects of the same kind and colour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub kind: ShapeKind,
    pub color: PaletteColor,
    pub pattern: Pattern,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_size: usize,
    pub num_objects: usize,
    /// Exactly `num_objects` entries assign kinds in order; any other
    /// non-empty list is the set kinds are drawn from.
    pub object_kinds: Vec<ShapeKind>,
    /// Same convention as `object_kinds`.
    pub palette: Vec<PaletteColor>,
    pub background_kind: BackgroundKind,
    pub rng_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            num_objects: 2,
            object_kinds: ShapeKind::ALL.to_vec(),
            palette: PaletteColor::ALL.to_vec(),
            background_kind: BackgroundKind::Solid,
            rng_seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.num_objects) {
            return Err(Error::InvalidSpec(format!(
                "num_objects must be in [2, 5], got {}",
                self.num_objects
            )));
        }
        if self.canvas_size < 24 {
            return Err(Error::InvalidSpec(format!(
                "canvas_size must be at least 24, got {}",
                self.canvas_size
            )));
        }
        if self.object_kinds.is_empty() || self.palette.is_empty() {
            return Err(Error::InvalidSpec("object_kinds and palette must be non-empty".into()));
        }
        Ok(())
    }
}

// --- captions ---------------------------------------------------------------

pub const PAD_TOKEN: u32 = 0;
pub const MAX_CAPTION_LEN: usize = 24;

/// Fixed caption vocabulary; index = token id.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "a", "and", "on", "background"];
    v.extend(PaletteColor::ALL.iter().map(|c| c.name()));
    v.extend(ShapeKind::ALL.iter().map(|k| k.name()));
    v.extend(BackgroundKind::ALL.iter().map(|k| k.name()));
    v
}

pub fn vocab_size() -> usize {
    vocabulary().len()
}

pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    let vocab = vocabulary();
    text.split_whitespace()
        .map(|w| {
            vocab
                .iter()
                .position(|v| *v == w)
                .map(|i| i as u32)
                .ok_or_else(|| Error::Invalid(format!("word `{w}` not in caption vocabulary")))
        })
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    let vocab = vocabulary();
    tokens
        .iter()
        .filter(|&&t| t != PAD_TOKEN)
        .map(|&t| vocab.get(t as usize).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn caption_text(objects: &[(ShapeKind, PaletteColor)], background: BackgroundKind) -> String {
    let parts: Vec<String> = objects
        .iter()
        .map(|(k, c)| format!("a {} {}", c.name(), k.name()))
        .collect();
    format!("{} on a {} background", parts.join(" and "), background.name())
}

// --- scenes -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub image: ImageGrid,
    pub caption: Vec<u32>,
    pub masks: Vec<MaskGrid>,
    pub background: ImageGrid,
    pub objects: Vec<ObjectInfo>,
    pub background_kind: BackgroundKind,
    pub seed: u64,
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [f32; 3], amount: f32) -> [f32; 3] {
    rgb.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn render_background(kind: BackgroundKind, size: usize, rng: &mut ChaCha8Rng) -> ImageGrid {
    let dark = |rng: &mut ChaCha8Rng| -> [f32; 3] { [0, 1, 2].map(|_| rng.random_range(0.05..0.32)) };
    let base = dark(rng);
    let mut img = ImageGrid::filled(size, size, base);
    match kind {
        BackgroundKind::Solid => {}
        BackgroundKind::Gradient => {
            let other = dark(rng);
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let half = size as f32 / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let proj = ((x as f32 - half) * dx + (y as f32 - half) * dy) / size as f32 + 0.5;
                    let t = proj.clamp(0.0, 1.0);
                    img.set(y, x, [0, 1, 2].map(|c| base[c] * (1.0 - t) + other[c] * t));
                }
            }
        }
        BackgroundKind::Checker => {
            let other = base.map(|v| (v * 0.55 + 0.02).min(1.0));
            let cell = (size / 8).max(2);
            for y in 0..size {
                for x in 0..size {
                    if (y / cell + x / cell) % 2 == 1 {
                        img.set(y, x, other);
                    }
                }
            }
        }
        BackgroundKind::Noise => {
            // Bilinear value noise on a coarse lattice.
            let lattice = 5;
            let vals: Vec<f32> = (0..lattice * lattice).map(|_| rng.random_range(-0.09..0.09)).collect();
            let scale = (lattice - 1) as f32 / (size - 1) as f32;
            for y in 0..size {
                for x in 0..size {
                    let (fy, fx) = (y as f32 * scale, x as f32 * scale);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(lattice - 1), (x0 + 1).min(lattice - 1));
                    let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
                    let v = vals[y0 * lattice + x0] * (1.0 - ty) * (1.0 - tx)
                        + vals[y0 * lattice + x1] * (1.0 - ty) * tx
                        + vals[y1 * lattice + x0] * ty * (1.0 - tx)
                        + vals[y1 * lattice + x1] * ty * tx;
                    img.set(y, x, base.map(|b| (b + v).clamp(0.0, 1.0)));
                }
            }
        }
    }
    img
}

struct Placement {
    mask: MaskGrid,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
}

fn rasterize(kind: ShapeKind, size: usize, cx: f32, cy: f32, radius: f32, angle: f32) -> MaskGrid {
    let mut mask = MaskGrid::empty(size, size);
    let (s, c) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let px = x as f32 + 0.5 - cx;
            let py = y as f32 + 0.5 - cy;
            let lx = (c * px + s * py) / radius;
            let ly = (-s * px + c * py) / radius;
            if kind.contains(lx, ly) {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

fn choose<T: Copy>(list: &[T], index: usize, exact: bool, rng: &mut ChaCha8Rng) -> T {
    if exact {
        list[index]
    } else {
        *list.choose(rng).expect("non-empty list")
    }
}

/// Renders one scene. Deterministic in `spec.rng_seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<TrainingSample> {
    spec.validate()?;
    let size = spec.canvas_size;
    let mut rng = rng_for(spec.rng_seed, &[0x5ce4e]);
    let background = render_background(spec.background_kind, size, &mut rng);
    let mut image = background.clone();
    let mut occupied = MaskGrid::empty(size, size);
    let mut masks = Vec::new();
    let mut objects = Vec::new();

    let exact_kinds = spec.object_kinds.len() == spec.num_objects;
    let exact_colors = spec.palette.len() == spec.num_objects;
    // Smaller sprites when crowded so five still fit.
    let crowd = if spec.num_objects >= 4 { 0.85 } else { 1.0 };
    let (r_lo, r_hi) = (0.13 * size as f32 * crowd, 0.2 * size as f32 * crowd);
    let mut attempts = 0;

    for n in 0..spec.num_objects {
        let kind = choose(&spec.object_kinds, n, exact_kinds, &mut rng);
        let color = choose(&spec.palette, n, exact_colors, &mut rng);
        let placed = loop {
            if attempts >= PLACEMENT_ATTEMPTS {
                return Err(Error::PlacementFailure {
                    requested: spec.num_objects,
                    attempts,
                });
            }
            attempts += 1;
            let radius = rng.random_range(r_lo..=r_hi);
            let lo = radius + 1.0;
            let hi = size as f32 - radius - 1.0;
            let cx = rng.random_range(lo..=hi);
            let cy = rng.random_range(lo..=hi);
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let mask = rasterize(kind, size, cx, cy, radius, angle);
            if mask.area() < MIN_OBJECT_AREA {
                continue;
            }
            // One-pixel gap keeps objects apart under 8-connectivity.
            if mask.dilate(1).intersect(&occupied).is_empty() {
                break Placement {
                    mask,
                    cx,
                    cy,
                    radius,
                    angle,
                };
            }
        };
        let pattern = *[Pattern::Solid, Pattern::Stripes, Pattern::Split]
            .choose(&mut rng)
            .expect("non-empty");
        let primary = jitter(&mut rng, color.rgb(), 0.05);
        let secondary = primary.map(|v| v * 0.55);
        let (s, c) = placed.angle.sin_cos();
        for y in 0..size {
            for x in 0..size {
                if !placed.mask.get(y, x) {
                    continue;
                }
                let px = x as f32 + 0.5 - placed.cx;
                let py = y as f32 + 0.5 - placed.cy;
                let lx = (c * px + s * py) / placed.radius;
                let alt = match pattern {
                    Pattern::Solid => false,
                    Pattern::Stripes => ((lx + 1.0) * 2.5).floor() as i32 % 2 == 1,
                    Pattern::Split => lx > 0.0,
                };
                image.set(y, x, if alt { secondary } else { primary });
            }
        }
        occupied = occupied.union(&placed.mask);
        let bbox = placed.mask.bbox().expect("area checked above");
        objects.push(ObjectInfo {
            kind,
            color,
            pattern,
            bbox,
        });
        masks.push(placed.mask);
    }

    let pairs: Vec<(ShapeKind, PaletteColor)> = objects.iter().map(|o| (o.kind, o.color)).collect();
    let caption = tokenize(&caption_text(&pairs, spec.background_kind))?;
    Ok(TrainingSample {
        image,
        caption,
        masks,
        background,
        objects,
        background_kind: spec.background_kind,
        seed: spec.rng_seed,
    })
}

// --- visual prompts ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Object,
    Background,
}

/// What a prompt depicts, used to compose captions for eval sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PromptLabel {
    Object { kind: ShapeKind, color: PaletteColor },
    Background { kind: BackgroundKind },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    /// Encoder-resolution pixels.
    pub pixels: ImageGrid,
    pub kind: PromptKind,
    /// Object mask in source-image coordinates.
    pub source_mask: Option<MaskGrid>,
    /// Object mask in prompt coordinates.
    pub prompt_mask: Option<MaskGrid>,
    /// Square source window the prompt was cropped from.
    pub window: Option<BBox>,
    pub label: Option<PromptLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPromptSet {
    pub prompts: Vec<VisualPrompt>,
}

impl VisualPromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.prompts.iter().filter(|p| p.kind == PromptKind::Object).count()
    }

    pub fn objects(&self) -> impl Iterator<Item = &VisualPrompt> {
        self.prompts.iter().filter(|p| p.kind == PromptKind::Object)
    }

    pub fn background(&self) -> Option<&VisualPrompt> {
        self.prompts.last().filter(|p| p.kind == PromptKind::Background)
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=6).contains(&self.prompts.len()) {
            return Err(Error::InvalidSpec(format!(
                "prompt set must hold 3 to 6 prompts, got {}",
                self.prompts.len()
            )));
        }
        let bg = self.prompts.iter().filter(|p| p.kind == PromptKind::Background).count();
        if bg != 1 || self.background().is_none() {
            return Err(Error::InvalidSpec("exactly one background prompt, last".into()));
        }
        Ok(())
    }

    /// Caption assembled from the prompt labels, or `None` when a prompt is
    /// unlabeled.
    pub fn caption(&self) -> Option<Vec<u32>> {
        let mut objs = Vec::new();
        let mut bg = None;
        for p in &self.prompts {
            match p.label? {
                PromptLabel::Object { kind, color } => objs.push((kind, color)),
                PromptLabel::Background { kind } => bg = Some(kind),
            }
        }
        tokenize(&caption_text(&objs, bg?)).ok()
    }
}

/// Masked object crop: `image ⊙ mask` on a gray fill, square window with a
/// margin, resized to `resolution`.
pub fn object_prompt(
    image: &ImageGrid,
    mask: &MaskGrid,
    resolution: usize,
    label: Option<PromptLabel>,
) -> Result<VisualPrompt> {
    let bbox = mask.bbox().ok_or(Error::EmptyMask { index: 0 })?;
    let window = bbox.square_window(PROMPT_MARGIN, image.height.min(image.width));
    let mut masked = ImageGrid::filled(window.height(), window.width(), PROMPT_FILL);
    for y in 0..window.height() {
        for x in 0..window.width() {
            if mask.get(window.y0 + y, window.x0 + x) {
                masked.set(y, x, image.get(window.y0 + y, window.x0 + x));
            }
        }
    }
    let crop_mask = mask.crop(&window);
    let (pixels, prompt_mask) = if window.height() <= resolution {
        (
            masked.resize_nearest(resolution, resolution),
            crop_mask.resize_nearest(resolution, resolution),
        )
    } else {
        (
            masked.resize(resolution, resolution),
            crop_mask.resize_nearest(resolution, resolution),
        )
    };
    Ok(VisualPrompt {
        pixels,
        kind: PromptKind::Object,
        source_mask: Some(mask.clone()),
        prompt_mask: Some(prompt_mask),
        window: Some(window),
        label,
    })
}

pub fn background_prompt(background: &ImageGrid, resolution: usize, label: Option<PromptLabel>) -> VisualPrompt {
    VisualPrompt {
        pixels: background.resize(resolution, resolution),
        kind: PromptKind::Background,
        source_mask: None,
        prompt_mask: None,
        window: None,
        label,
    }
}

/// Object prompts in mask order, then the background prompt.
pub fn extract_visual_prompts(sample: &TrainingSample, resolution: usize) -> Result<VisualPromptSet> {
    let mut prompts = Vec::with_capacity(sample.masks.len() + 1);
    for (i, mask) in sample.masks.iter().enumerate() {
        let area = mask.area();
        if area == 0 {
            return Err(Error::EmptyMask { index: i });
        }
        if area < MIN_OBJECT_AREA {
            return Err(Error::InvalidSpec(format!(
                "object mask {i} has {area} pixels, fewer than {MIN_OBJECT_AREA}"
            )));
        }
        let label = sample.objects.get(i).map(|o| PromptLabel::Object {
            kind: o.kind,
            color: o.color,
        });
        prompts.push(object_prompt(&sample.image, mask, resolution, label)?);
    }
    prompts.push(background_prompt(
        &sample.background,
        resolution,
        Some(PromptLabel::Background {
            kind: sample.background_kind,
        }),
    ));
    Ok(VisualPromptSet { prompts })
}

/// Pastes an object prompt back into a canvas at its source window.
pub fn uncrop_prompt(prompt: &VisualPrompt, canvas: &mut ImageGrid) {
    let (Some(window), Some(mask)) = (prompt.window, prompt.source_mask.as_ref()) else {
        return;
    };
    let back = prompt.pixels.resize_nearest(window.height(), window.width());
    for y in 0..window.height() {
        for x in 0..window.width() {
            if mask.get(window.y0 + y, window.x0 + x) {
                canvas.set(window.y0 + y, window.x0 + x, back.get(y, x));
            }
        }
    }
}

// --- datasets ---------------------------------------------------------------

/// Settings for bulk scene generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub canvas_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_kinds: Vec<ShapeKind>,
    pub palette: Vec<PaletteColor>,
    pub background_kinds: Vec<BackgroundKind>,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            canvas_size: 64,
            min_objects: 2,
            max_objects: 4,
            object_kinds: ShapeKind::ALL.to_vec(),
            palette: PaletteColor::ALL.to_vec(),
            background_kinds: BackgroundKind::ALL.to_vec(),
        }
    }
}

impl SceneDistribution {
    /// Draws the `SceneSpec` for scene `index`, reseeding after placement
    /// failures.
    pub fn scene(&self, seed: u64, index: u64) -> Result<TrainingSample> {
        let mut last = None;
        for retry in 0..16u64 {
            let mut rng = rng_for(seed, &[index, retry]);
            let spec = SceneSpec {
                canvas_size: self.canvas_size,
                num_objects: rng.random_range(self.min_objects..=self.max_objects),
                object_kinds: self.object_kinds.clone(),
                palette: self.palette.clone(),
                background_kind: *self.background_kinds.choose(&mut rng).ok_or_else(|| {
                    Error::InvalidSpec("background_kinds must be non-empty".into())
                })?,
                rng_seed: derive_seed(seed, &[index, retry, 1]),
            };
            match generate_scene(&spec) {
                Ok(s) => return Ok(s),
                Err(e @ Error::PlacementFailure { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one retry"))
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<TrainingSample>> {
        (0..count as u64).map(|i| self.scene(seed, i)).collect()
    }
}

/// Evaluation prompt sets whose objects and backgrounds come from
/// independently seeded scenes.
pub fn build_eval_set(
    count: usize,
    prompt_counts: &BTreeSet<usize>,
    seed: u64,
    dist: &SceneDistribution,
    resolution: usize,
) -> Result<Vec<VisualPromptSet>> {
    if prompt_counts.is_empty() || prompt_counts.iter().any(|n| !(3..=5).contains(n)) {
        return Err(Error::InvalidSpec(format!(
            "prompt counts must be a non-empty subset of {{3, 4, 5}}, got {prompt_counts:?}"
        )));
    }
    let counts: Vec<usize> = prompt_counts.iter().copied().collect();
    let single = SceneDistribution {
        min_objects: 2,
        max_objects: 2,
        ..dist.clone()
    };
    let mut sets = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let mut rng = rng_for(seed, &[0xe7a1, i]);
        let n = *counts.choose(&mut rng).expect("non-empty");
        let mut prompts = Vec::with_capacity(n);
        for slot in 0..n as u64 - 1 {
            let scene = single.scene(derive_seed(seed, &[0xe7a1, i]), slot)?;
            let o = &scene.objects[0];
            let label = PromptLabel::Object {
                kind: o.kind,
                color: o.color,
            };
            prompts.push(object_prompt(&scene.image, &scene.masks[0], resolution, Some(label))?);
        }
        let bg_scene = single.scene(derive_seed(seed, &[0xe7a1, i]), 1000)?;
        prompts.push(background_prompt(
            &bg_scene.background,
            resolution,
            Some(PromptLabel::Background {
                kind: bg_scene.background_kind,
            }),
        ));
        sets.push(VisualPromptSet { prompts });
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub seed: u64,
    pub image: String,
    pub background: String,
    pub masks: Vec<String>,
    pub caption: String,
    pub caption_tokens: Vec<u32>,
    pub background_kind: BackgroundKind,
    pub objects: Vec<ObjectInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub image: String,
    pub mask: Option<String>,
    pub kind: PromptKind,
    pub label: Option<PromptLabel>,
    pub window: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSetEntry {
    pub id: usize,
    pub caption: Option<String>,
    pub prompts: Vec<PromptEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub split: String,
    pub seed: u64,
    pub canvas_size: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_sets: Vec<PromptSetEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported manifest format_version {} (expected {MANIFEST_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }

    fn store(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Writes a training split: PNGs per sample plus `manifest.json`.
pub fn write_training_split(dir: &Path, split: &str, seed: u64, samples: &[TrainingSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let image = format!("{id:05}_image.png");
        let background = format!("{id:05}_background.png");
        s.image.save_png(&dir.join(&image))?;
        s.background.save_png(&dir.join(&background))?;
        let mut masks = Vec::with_capacity(s.masks.len());
        for (k, m) in s.masks.iter().enumerate() {
            let name = format!("{id:05}_mask{k}.png");
            m.save_png(&dir.join(&name))?;
            masks.push(name);
        }
        entries.push(SampleEntry {
            id,
            seed: s.seed,
            image,
            background,
            masks,
            caption: detokenize(&s.caption),
            caption_tokens: s.caption.clone(),
            background_kind: s.background_kind,
            objects: s.objects.clone(),
        });
    }
    Manifest {
        format_version: MANIFEST_VERSION,
        split: split.to_string(),
        seed,
        canvas_size: samples.first().map_or(0, |s| s.image.height),
        samples: entries,
        prompt_sets: Vec::new(),
    }
    .store(dir)
}

/// Reads a training split back. Images round-trip through 8-bit PNG.
pub fn read_training_split(dir: &Path) -> Result<Vec<TrainingSample>> {
    let m = Manifest::load(dir)?;
    m.samples
        .iter()
        .map(|e| {
            Ok(TrainingSample {
                image: ImageGrid::load_png(&dir.join(&e.image))?,
                background: ImageGrid::load_png(&dir.join(&e.background))?,
                masks: e
                    .masks
                    .iter()
                    .map(|f| MaskGrid::load_png(&dir.join(f)))
                    .collect::<Result<_>>()?,
                caption: e.caption_tokens.clone(),
                objects: e.objects.clone(),
                background_kind: e.background_kind,
                seed: e.seed,
            })
        })
        .collect()
}

pub fn write_eval_split(dir: &Path, seed: u64, sets: &[VisualPromptSet]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(sets.len());
    for (id, set) in sets.iter().enumerate() {
        let mut prompts = Vec::with_capacity(set.len());
        for (n, p) in set.prompts.iter().enumerate() {
            let image = format!("{id:05}_prompt{n}.png");
            p.pixels.save_png(&dir.join(&image))?;
            let mask = match &p.prompt_mask {
                Some(m) => {
                    let name = format!("{id:05}_prompt{n}_mask.png");
                    m.save_png(&dir.join(&name))?;
                    Some(name)
                }
                None => None,
            };
            prompts.push(PromptEntry {
                image,
                mask,
                kind: p.kind,
                label: p.label,
                window: p.window,
            });
        }
        entries.push(PromptSetEntry {
            id,
            caption: set.caption().map(|c| detokenize(&c)),
            prompts,
        });
    }
    Manifest {
        format_version: MANIFEST_VERSION,
        split: "eval".into(),
        seed,
        canvas_size: 0,
        samples: Vec::new(),
        prompt_sets: entries,
    }
    .store(dir)
}

/// Reads an eval split. Source masks are not stored, only prompt-frame
/// masks.
pub fn read_eval_split(dir: &Path) -> Result<Vec<VisualPromptSet>> {
    let m = Manifest::load(dir)?;
    m.prompt_sets
        .iter()
        .map(|e| {
            let prompts = e
                .prompts
                .iter()
                .map(|p| {
                    Ok(VisualPrompt {
                        pixels: ImageGrid::load_png(&dir.join(&p.image))?,
                        kind: p.kind,
                        source_mask: None,
                        prompt_mask: match &p.mask {
                            Some(f) => Some(MaskGrid::load_png(&dir.join(f))?),
                            None => None,
                        },
                        window: p.window,
                        label: p.label,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(VisualPromptSet { prompts })
        })
        .collect()
}
