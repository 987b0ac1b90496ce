//! Handcrafted region descriptor used for prompt/segment similarity.
//!
//! Raw statistics of a masked region (soft colour histogram, normalized
//! central moments of the mask, grayscale thumbnail of a centroid-centred window)
//! are whitened against a fixed synthetic reference corpus and
//! L2-normalized. Everything that depends on pixel values is built from
//! differentiable tensor ops so identity losses can backpropagate into
//! images.

use std::sync::OnceLock;

use kvmix_tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, MaskGrid};
use crate::sprite_world::{extract_visual_prompts, SceneDistribution};

pub const HIST_BINS: usize = 8;
pub const THUMB: usize = 8;
pub const MOMENTS: usize = 7;
pub const RAW_DIM: usize = 3 * HIST_BINS + MOMENTS + THUMB * THUMB;
pub const METRIC_DIM: usize = 64;

const HIST_WEIGHT: f32 = 1.0;
const MOMENT_WEIGHT: f32 = 1.0;
const THUMB_WEIGHT: f32 = 1.0;
/// Thumbnail half-width in RMS radii of the region.
const WINDOW_RADII: f64 = 1.6;
/// Eigenvalue floor as a fraction of the mean eigenvalue.
const SHRINKAGE: f64 = 1.0;
const CORPUS_SCENES: u64 = 160;
const CORPUS_SEED: u64 = 0x6d65_7472;

/// Unit-norm region descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFeature(pub Vec<f32>);

impl MetricFeature {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Cosine of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &MetricFeature, b: &MetricFeature) -> f32 {
    let dot: f32 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0)
}

/// Mean vector and projection learned from the reference corpus.
#[derive(Debug, Clone)]
pub struct Whitening {
    mean: Tensor,
    proj: Tensor,
}

static WHITENING: OnceLock<Whitening> = OnceLock::new();

pub fn whitening() -> &'static Whitening {
    WHITENING.get_or_init(build_whitening)
}

fn build_whitening() -> Whitening {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for canvas in [32usize, 64] {
        let dist = SceneDistribution {
            canvas_size: canvas,
            ..SceneDistribution::default()
        };
        for i in 0..CORPUS_SCENES / 2 {
            let scene = dist.scene(CORPUS_SEED, i + canvas as u64 * 1000).expect("corpus scene");
            let set = extract_visual_prompts(&scene, 32).expect("corpus prompts");
            for (p, m) in set.objects().zip(&scene.masks) {
                let pm = p.prompt_mask.as_ref().expect("object prompt mask");
                rows.push(raw_features(&p.pixels.to_unit_tensor(), pm).expect("non-empty").to_vec());
                rows.push(raw_features(&scene.image.to_unit_tensor(), m).expect("non-empty").to_vec());
            }
        }
    }
    let n = rows.len();
    let mut mean = vec![0.0f64; RAW_DIM];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += *v as f64 / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(RAW_DIM, RAW_DIM);
    for r in &rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| *v as f64 - m).collect();
        for i in 0..RAW_DIM {
            for j in i..RAW_DIM {
                cov[(i, j)] += c[i] * c[j] / (n - 1) as f64;
            }
        }
    }
    for i in 0..RAW_DIM {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..RAW_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let floor = SHRINKAGE * eig.eigenvalues.iter().map(|v| v.max(0.0)).sum::<f64>() / RAW_DIM as f64;
    let mut proj = vec![0.0f32; RAW_DIM * METRIC_DIM];
    for (k, &idx) in order.iter().take(METRIC_DIM).enumerate() {
        let scale = 1.0 / (eig.eigenvalues[idx].max(0.0) + floor).sqrt();
        let v = eig.eigenvectors.column(idx);
        // Fix the sign so the basis is reproducible.
        let pivot = (0..RAW_DIM).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..RAW_DIM {
            proj[i * METRIC_DIM + k] = (sign * v[i] * scale) as f32;
        }
    }
    Whitening {
        mean: Tensor::from_vec(mean.iter().map(|v| *v as f32).collect(), &[1, RAW_DIM]),
        proj: Tensor::from_vec(proj, &[RAW_DIM, METRIC_DIM]),
    }
}

/// Normalized central moments `eta_pq` for `p + q` in {2, 3}.
fn shape_moments(mask: &MaskGrid) -> [f32; MOMENTS] {
    let (mut m00, mut sx, mut sy) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                m00 += 1.0;
                sx += x as f64;
                sy += y as f64;
            }
        }
    }
    let (cx, cy) = (sx / m00, sy / m00);
    let mut mu = [[0.0f64; 4]; 4];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                for p in 0..4 {
                    for q in 0..4 - p {
                        mu[p][q] += dx.powi(p as i32) * dy.powi(q as i32);
                    }
                }
            }
        }
    }
    let eta = |p: usize, q: usize| mu[p][q] / m00.powf(1.0 + (p + q) as f64 / 2.0);
    [
        eta(2, 0),
        eta(1, 1),
        eta(0, 2),
        eta(3, 0) * 4.0,
        eta(2, 1) * 4.0,
        eta(1, 2) * 4.0,
        eta(0, 3) * 4.0,
    ]
    .map(|v| v as f32 * 4.0)
}

/// Resampling matrix from `len` unit pixels to `out` cells spanning the
/// interval `[lo, lo + span)`, weights proportional to overlap. Cells past
/// the image edge pick up nothing.
fn window_weights(len: usize, out: usize, lo: f64, span: f64) -> Vec<f32> {
    let mut w = vec![0.0f32; out * len];
    let step = span / out as f64;
    for i in 0..out {
        let (a, b) = (lo + i as f64 * step, lo + (i + 1) as f64 * step);
        let first = a.floor().max(0.0) as usize;
        let last = (b.ceil().max(0.0) as usize).min(len);
        for j in first..last {
            let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
            w[i * len + j] = (overlap / step) as f32;
        }
    }
    w
}

/// Square window around the mask centroid, sized by the RMS radius so a
/// pixel more or less moves it only slightly. Returns `(x0, y0, side)`.
fn centroid_window(mask: &MaskGrid) -> (f64, f64, f64) {
    let (mut n, mut sx, mut sy, mut sxx, mut syy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                n += 1.0;
                sx += fx;
                sy += fy;
                sxx += fx * fx;
                syy += fy * fy;
            }
        }
    }
    let (cx, cy) = (sx / n, sy / n);
    let var = (sxx / n - cx * cx) + (syy / n - cy * cy);
    let half = WINDOW_RADII * var.max(0.25).sqrt();
    (cx - half, cy - half, 2.0 * half)
}

/// Raw descriptor `(RAW_DIM,)` of the region `mask` of `pixels`, a
/// `(3, H, W)` tensor in `[0, 1]`.
pub fn raw_features(pixels: &Tensor, mask: &MaskGrid) -> Result<Tensor> {
    let (h, w) = (pixels.dim(1), pixels.dim(2));
    if (mask.height, mask.width) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height, mask.width
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask { index: 0 });
    }
    let area = mask.area() as f32;
    let flat = pixels.reshape(&[3, h * w]);
    let m = Tensor::from_vec(mask.to_f32(), &[1, 1, h * w]);

    let centers: Vec<f32> = (0..HIST_BINS).map(|b| (b as f32 + 0.5) / HIST_BINS as f32).collect();
    let hist = flat
        .unsqueeze(1)
        .sub(&Tensor::from_vec(centers, &[1, HIST_BINS, 1]))
        .abs()
        .affine(-(HIST_BINS as f32), 1.0)
        .relu()
        .mul(&m)
        .sum_axis(2)
        .scale(HIST_WEIGHT / area)
        .reshape(&[3 * HIST_BINS]);

    let moments = Tensor::from_vec(shape_moments(mask).map(|v| v * MOMENT_WEIGHT).to_vec(), &[MOMENTS]);

    let luma = Tensor::from_vec(vec![0.299, 0.587, 0.114], &[1, 3]);
    let m2 = Tensor::from_vec(mask.to_f32(), &[1, h * w]);
    let gray = luma
        .matmul(&flat)
        .sub(&Tensor::scalar(0.5))
        .mul(&m2)
        .reshape(&[h, w]);
    let (x0, y0, side) = centroid_window(mask);
    let ry = Tensor::from_vec(window_weights(h, THUMB, y0, side), &[THUMB, h]);
    let rx = Tensor::from_vec(window_weights(w, THUMB, x0, side), &[THUMB, w]);
    let thumb = ry
        .matmul(&gray)
        .matmul_t(&rx, false, true)
        .scale(THUMB_WEIGHT)
        .reshape(&[THUMB * THUMB]);

    Ok(Tensor::concat(&[hist, moments, thumb], 0))
}

/// Differentiable descriptor `(METRIC_DIM,)` with unit norm.
pub fn metric_features_tensor(pixels: &Tensor, mask: &MaskGrid) -> Result<Tensor> {
    let wh = whitening();
    let raw = raw_features(pixels, mask)?.reshape(&[1, RAW_DIM]);
    let y = raw.sub(&wh.mean).matmul(&wh.proj).reshape(&[METRIC_DIM]);
    let norm = y.sqr().sum_all().add_scalar(1e-12).sqrt();
    Ok(y.div(&norm))
}

/// Descriptor of `pixels` restricted to `mask`, or of the whole image.
pub fn metric_features(pixels: &ImageGrid, mask: Option<&MaskGrid>) -> Result<MetricFeature> {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = MaskGrid::full(pixels.height, pixels.width);
            &full
        }
    };
    let t = metric_features_tensor(&pixels.to_unit_tensor(), mask)?;
    Ok(MetricFeature(t.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprite_world::{generate_scene, SceneSpec};

    fn scene(seed: u64) -> crate::sprite_world::TrainingSample {
        generate_scene(&SceneSpec {
            rng_seed: seed,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn unit_norm_and_self_similarity() {
        let s = scene(4);
        let a = metric_features(&s.image, Some(&s.masks[0])).unwrap();
        let b = metric_features(&s.image, Some(&s.masks[0])).unwrap();
        let norm: f32 = a.0.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(a, b);
        assert!((cosine_sim(&a, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_rejected() {
        let s = scene(4);
        let err = metric_features(&s.image, Some(&MaskGrid::empty(64, 64)));
        assert!(matches!(err, Err(Error::EmptyMask { .. })));
    }

    #[test]
    fn window_weights_inside_the_image_sum_to_one() {
        for (len, lo, span) in [(13, 0.0, 13.0), (32, 3.25, 7.5), (32, 10.0, 20.5)] {
            let w = window_weights(len, 8, lo, span);
            for row in w.chunks(len) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
        // Cells beyond the edge stay empty.
        let w = window_weights(8, 4, -8.0, 16.0);
        assert_eq!(w[..8].iter().sum::<f32>(), 0.0);
        assert!((w[3 * 8..].iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_pixel_more_barely_moves_the_descriptor() {
        let s = generate_scene(&SceneSpec {
            canvas_size: 32,
            num_objects: 2,
            rng_seed: 11,
            ..SceneSpec::default()
        })
        .unwrap();
        let m = &s.masks[0];
        let mut grown = m.clone();
        let edge = (0..32 * 32)
            .map(|i| (i / 32, i % 32))
            .find(|&(y, x)| !m.get(y, x) && m.dilate(1).get(y, x))
            .unwrap();
        grown.set(edge.0, edge.1, true);
        let a = metric_features(&s.image, Some(m)).unwrap();
        let b = metric_features(&s.image, Some(&grown)).unwrap();
        assert!(cosine_sim(&a, &b) > 0.9, "{}", cosine_sim(&a, &b));
    }
}
