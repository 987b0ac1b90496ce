use crate::{numel, Op, Tensor};

fn mean_rstd(xs: &[f32], eps: f32) -> (f32, f32) {
    let n = xs.len() as f32;
    let mean = xs.iter().sum::<f32>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl Tensor {
    /// Group normalization over `(B, C, ...)` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
        let s = self.shape();
        assert!(s.len() >= 2, "group_norm needs (B, C, ...), got {s:?}");
        let (b, c) = (s[0], s[1]);
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        assert_eq!(gamma.shape(), &[c]);
        assert_eq!(beta.shape(), &[c]);
        let spatial = numel(&s[2..]);
        let cg = c / groups;
        let x = self.data();
        let (ga, be) = (gamma.data(), beta.data());
        let mut out = vec![0.0; x.len()];
        let mut stats = Vec::with_capacity(b * groups);
        for n in 0..b {
            for g in 0..groups {
                let start = (n * c + g * cg) * spatial;
                let block = &x[start..start + cg * spatial];
                let (mean, rstd) = mean_rstd(block, eps);
                stats.push((mean, rstd));
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for k in 0..spatial {
                        let i = start + ci * spatial + k;
                        out[i] = (x[i] - mean) * rstd * ga[ch] + be[ch];
                    }
                }
            }
        }
        Tensor::from_op(
            out,
            s.to_vec(),
            Op::GroupNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                groups,
                stats,
            },
        )
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
        let d = *self.shape().last().expect("layer_norm of a scalar");
        assert_eq!(gamma.shape(), &[d]);
        assert_eq!(beta.shape(), &[d]);
        let x = self.data();
        let (ga, be) = (gamma.data(), beta.data());
        let mut out = vec![0.0; x.len()];
        let mut stats = Vec::with_capacity(x.len() / d.max(1));
        for (r, row) in x.chunks(d).enumerate() {
            let (mean, rstd) = mean_rstd(row, eps);
            stats.push((mean, rstd));
            for k in 0..d {
                out[r * d + k] = (row[k] - mean) * rstd * ga[k] + be[k];
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                stats,
            },
        )
    }
}

/// Shared backward for both normalizations. `channel_of(i)` maps a flat
/// element index to its affine parameter index; blocks are contiguous runs
/// of `block_len` elements sharing one `(mean, rstd)` pair.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward(
    x: &[f32],
    gamma: &[f32],
    stats: &[(f32, f32)],
    block_len: usize,
    grad: &[f32],
    channel_of: impl Fn(usize) -> usize,
    dx: &mut [f32],
    dgamma: &mut [f32],
    dbeta: &mut [f32],
) {
    let n = block_len as f32;
    for (blk, &(mean, rstd)) in stats.iter().enumerate() {
        let start = blk * block_len;
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in start..start + block_len {
            let ch = channel_of(i);
            let xhat = (x[i] - mean) * rstd;
            let dxhat = grad[i] * gamma[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma[ch] += grad[i] * xhat;
            dbeta[ch] += grad[i];
        }
        for i in start..start + block_len {
            let ch = channel_of(i);
            let xhat = (x[i] - mean) * rstd;
            let dxhat = grad[i] * gamma[ch];
            dx[i] += rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
}
