//! KV-mixed decoupled cross-attention.
//!
//! The text path and the image-prompt path have separate softmaxes whose
//! outputs are summed. In the image path, keys are projected from layout
//! tokens and values from appearance tokens, so where a prompt lands is
//! decided by the layout stream alone.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use kvmix_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::adapters::PromptTokenBundle;
use crate::error::{Error, Result};
use crate::image::MaskGrid;
use crate::params::{self, Init, ParamStore};

/// Projections of one attention site, looked up under `prefix`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    pub store: &'a ParamStore,
    pub prefix: &'a str,
    pub heads: usize,
}

impl AttentionParams<'_> {
    fn key(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    fn linear(&self, name: &str, x: &Tensor) -> Tensor {
        params::linear(self.store, &self.key(name), x)
    }
}

/// Adds one attention site. Query input width `query_dim`, token width
/// `width`; the image-path projections start at zero.
pub fn init_attention(init: &mut Init<'_>, prefix: &str, query_dim: usize, width: usize) {
    init.linear(&format!("{prefix}.to_q"), query_dim, width, false);
    init.linear(&format!("{prefix}.to_k"), width, width, false);
    init.linear(&format!("{prefix}.to_v"), width, width, false);
    init.linear_zero(&format!("{prefix}.to_k_img"), width, width);
    init.linear_zero(&format!("{prefix}.to_v_img"), width, width);
    init.linear(&format!("{prefix}.to_out"), width, query_dim, true);
}

/// Per-prompt allowed regions at image resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskOverride {
    pub per_prompt_allowed: Vec<MaskGrid>,
    pub enabled: bool,
}

impl MaskOverride {
    pub fn new(per_prompt_allowed: Vec<MaskGrid>) -> Self {
        Self {
            per_prompt_allowed,
            enabled: true,
        }
    }

    pub fn allow_all(prompts: usize, size: usize) -> Self {
        Self::new(vec![MaskGrid::full(size, size); prompts])
    }

    pub fn resolution(&self) -> usize {
        self.per_prompt_allowed.first().map_or(0, |m| m.height)
    }

    /// Every query position must keep at least one prompt.
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        let first = self
            .per_prompt_allowed
            .first()
            .ok_or_else(|| Error::Invalid("mask override without prompts".into()))?;
        for m in &self.per_prompt_allowed {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape("override masks differ in size".into()));
            }
        }
        for pos in 0..first.data.len() {
            if !self.per_prompt_allowed.iter().any(|m| m.data[pos]) {
                return Err(Error::AllMasked { position: pos });
            }
        }
        Ok(())
    }

    /// Max-pooled to a square layer resolution.
    pub fn at_resolution(&self, size: usize) -> MaskOverride {
        MaskOverride {
            per_prompt_allowed: self.per_prompt_allowed.iter().map(|m| m.max_pool_to(size)).collect(),
            enabled: self.enabled,
        }
    }

    /// `true` where the logit at `(head, query, key)` must be removed, for
    /// `heads` heads over the given spans.
    pub fn logit_mask(&self, spans: &[std::ops::Range<usize>], heads: usize) -> Result<Vec<bool>> {
        if spans.len() != self.per_prompt_allowed.len() {
            return Err(Error::SpanMismatch(format!(
                "{} spans but {} override masks",
                spans.len(),
                self.per_prompt_allowed.len()
            )));
        }
        self.validate()?;
        let l = self.per_prompt_allowed[0].data.len();
        let nt = spans.last().map_or(0, |s| s.end);
        let mut row = vec![false; l * nt];
        for (n, span) in spans.iter().enumerate() {
            let allowed = &self.per_prompt_allowed[n];
            for q in 0..l {
                if !allowed.data[q] {
                    row[q * nt + span.start..q * nt + span.end].fill(true);
                }
            }
        }
        let mut out = Vec::with_capacity(heads * row.len());
        for _ in 0..heads {
            out.extend_from_slice(&row);
        }
        Ok(out)
    }
}

/// Removes disallowed logits in `(H, L, N*T)` image-path scores.
pub fn apply_segment_mask(logits: &Tensor, ov: &MaskOverride, spans: &[std::ops::Range<usize>]) -> Result<Tensor> {
    if !ov.enabled {
        return Ok(logits.clone());
    }
    let heads = logits.dim(0);
    let l = logits.dim(1);
    let ov = if ov.resolution() * ov.resolution() == l {
        ov.clone()
    } else {
        let side = (l as f64).sqrt() as usize;
        ov.at_resolution(side)
    };
    let mask = ov.logit_mask(spans, heads)?;
    if mask.len() != logits.numel() {
        return Err(Error::Shape(format!(
            "override covers {} logits, scores hold {}",
            mask.len(),
            logits.numel()
        )));
    }
    Ok(logits.masked_fill(Arc::new(mask), f32::MIN))
}

/// Moves one prompt's region by `(dx, dy)` pixels. Other prompts give up
/// the destination, and the vacated area goes to the background prompt
/// (the last one).
pub fn shift_prompt_attention(ov: &MaskOverride, prompt: usize, dx: i32, dy: i32) -> Result<MaskOverride> {
    let n = ov.per_prompt_allowed.len();
    if prompt >= n {
        return Err(Error::Invalid(format!("prompt index {prompt} out of range for {n} prompts")));
    }
    if dx == 0 && dy == 0 {
        return Ok(ov.clone());
    }
    let old = &ov.per_prompt_allowed[prompt];
    let moved = old.translate(dx, dy);
    if moved.is_empty() {
        return Err(Error::EmptyShift { prompt, dx, dy });
    }
    let vacated = old.intersect(&moved.complement());
    let mut masks = ov.per_prompt_allowed.clone();
    for (j, m) in masks.iter_mut().enumerate() {
        if j == prompt {
            *m = moved.clone();
        } else {
            *m = m.intersect(&moved.complement());
            if j == n - 1 {
                *m = m.union(&vacated);
            }
        }
    }
    let out = MaskOverride {
        per_prompt_allowed: masks,
        enabled: ov.enabled,
    };
    out.validate()?;
    Ok(out)
}

/// Maps from one attention site for one batch element.
#[derive(Debug, Clone)]
pub struct AttentionEntry {
    pub layer: String,
    pub resolution: usize,
    /// `(N, L)` per-prompt maps, heads averaged, summed over each span.
    pub prompt_maps: Tensor,
    /// `(H, L, N*T)` image-path probabilities.
    pub image_probs: Tensor,
}

/// All decoupled layers of one forward pass for one batch element.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub per_layer: Vec<AttentionEntry>,
    pub overrides: Option<MaskOverride>,
}

impl AttentionRecord {
    pub fn at_resolution(&self, res: usize) -> impl Iterator<Item = &AttentionEntry> {
        self.per_layer.iter().filter(move |e| e.resolution == res)
    }

    /// Writes an uncompressed NPZ archive with one `(res, res)` float32
    /// array per `layer{L}/prompt{n}`.
    pub fn export_npz(&self, path: &Path) -> Result<()> {
        let mut arrays = BTreeMap::new();
        for (li, e) in self.per_layer.iter().enumerate() {
            let (n, l) = (e.prompt_maps.dim(0), e.prompt_maps.dim(1));
            for k in 0..n {
                let data = e.prompt_maps.data()[k * l..(k + 1) * l].to_vec();
                arrays.insert(format!("layer{li}/prompt{k}"), (vec![e.resolution, e.resolution], data));
            }
        }
        write_npz(path, &arrays)
    }
}

/// Sum of image-path probabilities over each prompt's span, averaged over
/// heads: `(H, L, N*T)` to `(N, L)`.
pub fn aggregate_prompt_maps(image_probs: &Tensor, spans: &[std::ops::Range<usize>]) -> Result<Tensor> {
    let nt = image_probs.dim(2);
    if spans.last().map_or(0, |s| s.end) != nt {
        return Err(Error::SpanMismatch(format!("spans do not cover {nt} image tokens")));
    }
    let n = spans.len();
    let mut ind = vec![0.0; nt * n];
    for (k, s) in spans.iter().enumerate() {
        for i in s.clone() {
            ind[i * n + k] = 1.0;
        }
    }
    let mean = image_probs.mean_axis(0);
    Ok(mean.matmul(&Tensor::from_vec(ind, &[nt, n])).transpose(0, 1))
}

/// Image-path attention for one batch element. `q` is `(1, L, D)`;
/// returns the output `(1, L, D)` and the probabilities `(H, L, N*T)`.
pub fn image_attention(
    att: &AttentionParams<'_>,
    q: &Tensor,
    bundle: &PromptTokenBundle,
    ov: Option<&MaskOverride>,
) -> Result<(Tensor, Tensor)> {
    let (l, width) = (q.dim(1), q.dim(2));
    if width != bundle.width() || width % att.heads != 0 {
        return Err(Error::Shape(format!(
            "query width {width} vs token width {} with {} heads",
            bundle.width(),
            att.heads
        )));
    }
    let nt = bundle.num_tokens();
    let h = att.heads;
    let d = width / h;
    let k = att.linear("to_k_img", &bundle.layout);
    let v = att.linear("to_v_img", &bundle.appearance);
    let qh = q.reshape(&[l, h, d]).permute(&[1, 0, 2]);
    let kh = k.reshape(&[nt, h, d]).permute(&[1, 0, 2]);
    let vh = v.reshape(&[nt, h, d]).permute(&[1, 0, 2]);
    let mut logits = qh.matmul_t(&kh, false, true).scale(1.0 / (d as f32).sqrt());
    if let Some(ov) = ov {
        logits = apply_segment_mask(&logits, ov, &bundle.spans)?;
    }
    let probs = logits.softmax();
    let out = probs.matmul(&vh).permute(&[1, 0, 2]).reshape(&[1, l, width]);
    Ok((out, probs))
}

/// Conditioning for one batch element of a decoupled layer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub bundle: Option<&'a PromptTokenBundle>,
    pub overrides: Option<&'a MaskOverride>,
}

/// Decoupled cross-attention on `(B, L, C)` query features with `(B, Lt, D)`
/// text tokens. Elements without a bundle get no image-path term.
pub fn kv_mixed_xattn(
    att: &AttentionParams<'_>,
    q_features: &Tensor,
    text: &Tensor,
    cond: &[Conditioning<'_>],
    resolution: usize,
) -> Result<(Tensor, Vec<Option<AttentionEntry>>)> {
    let (b, l) = (q_features.dim(0), q_features.dim(1));
    if cond.len() != b || text.dim(0) != b {
        return Err(Error::Shape(format!(
            "batch {b} with {} conditionings and {} captions",
            cond.len(),
            text.dim(0)
        )));
    }
    let q = att.linear("to_q", q_features);
    let k = att.linear("to_k", text);
    let v = att.linear("to_v", text);
    let (text_out, _) = params::multi_head_attention(&q, &k, &v, att.heads, None);

    let mut entries = Vec::with_capacity(b);
    let mut img_parts = Vec::with_capacity(b);
    let mut any = false;
    for (i, c) in cond.iter().enumerate() {
        match c.bundle {
            Some(bundle) => {
                let qi = if b == 1 { q.clone() } else { q.narrow(0, i, 1) };
                let ov = c.overrides.filter(|o| o.enabled);
                let (out, probs) = image_attention(att, &qi, bundle, ov)?;
                img_parts.push(out);
                entries.push(Some(AttentionEntry {
                    layer: att.prefix.to_string(),
                    resolution,
                    prompt_maps: aggregate_prompt_maps(&probs, &bundle.spans)?,
                    image_probs: probs,
                }));
                any = true;
            }
            None => {
                img_parts.push(Tensor::zeros(&[1, l, q.dim(2)]));
                entries.push(None);
            }
        }
    }
    let mixed = if any {
        let img = if b == 1 {
            img_parts.pop().expect("one part")
        } else {
            Tensor::concat(&img_parts, 0)
        };
        text_out.add(&img)
    } else {
        text_out
    };
    Ok((att.linear("to_out", &mixed), entries))
}

fn npy_bytes(shape: &[usize], data: &[f32]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_str = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape_str}, }}");
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Uncompressed zip of `.npy` members, as `numpy.load` expects.
fn write_npz(path: &Path, arrays: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
    let mut zip = zip::ZipWriter::new(fs::File::create(path)?);
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    for (name, (shape, data)) in arrays {
        zip.start_file(format!("{name}.npy"), opts).map_err(std::io::Error::other)?;
        zip.write_all(&npy_bytes(shape, data))?;
    }
    zip.finish().map_err(std::io::Error::other)?;
    Ok(())
}
