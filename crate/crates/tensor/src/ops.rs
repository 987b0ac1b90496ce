use std::sync::Arc;

use crate::gemm::gemm;
use crate::{contiguous_strides, numel, Op, Tensor};

/// Strides of `shape` viewed as broadcast into `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let own = contiguous_strides(shape);
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let r = a.len().max(b.len());
    let get = |s: &[usize], i: usize| {
        let pad = r - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    (0..r)
        .map(|i| {
            let (x, y) = (get(a, i), get(b, i));
            if x == y || y == 1 {
                x
            } else if x == 1 {
                y
            } else {
                panic!("shapes {a:?} and {b:?} are not broadcastable")
            }
        })
        .collect()
}

/// Visits every element of `out` in row-major order together with the
/// matching offsets into two strided operands.
#[inline]
pub(crate) fn for_each2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        let mut d = r - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` by accumulating over the
/// broadcast axes.
pub(crate) fn reduce_to(grad: &[f32], out: &[usize], target: &[usize]) -> Vec<f32> {
    if out == target {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; numel(target)];
    let st = broadcast_strides(target, out);
    let zero = vec![0; out.len()];
    for_each2(out, &st, &zero, |o, t, _| acc[t] += grad[o]);
    acc
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> (Vec<f32>, Vec<usize>) {
    let (da, db) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        return (data, a.shape().to_vec());
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; numel(&out)];
    for_each2(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
    (data, out)
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Vec<f32> {
    x.data().iter().map(|&v| f(v)).collect()
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Tensor {
        let (d, s) = binary(self, rhs, |x, y| x + y);
        Tensor::from_op(d, s, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        let (d, s) = binary(self, rhs, |x, y| x - y);
        Tensor::from_op(d, s, Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        let (d, s) = binary(self, rhs, |x, y| x * y);
        Tensor::from_op(d, s, Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn div(&self, rhs: &Tensor) -> Tensor {
        let (d, s) = binary(self, rhs, |x, y| x / y);
        Tensor::from_op(d, s, Op::Div(self.clone(), rhs.clone()))
    }

    /// `self * mul + add`
    pub fn affine(&self, mul: f32, add: f32) -> Tensor {
        let d = unary(self, |v| v * mul + add);
        Tensor::from_op(d, self.shape().to_vec(), Op::Affine(self.clone(), mul))
    }

    /// `self * a + rhs * b` for same-shaped operands, evaluated in f64 and
    /// rounded once.
    pub fn lincomb(&self, a: f64, rhs: &Tensor, b: f64) -> Tensor {
        assert_eq!(self.shape(), rhs.shape(), "lincomb needs equal shapes");
        let d = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&x, &y)| (x as f64 * a + y as f64 * b) as f32)
            .collect();
        Tensor::from_op(d, self.shape().to_vec(), Op::LinComb(self.clone(), rhs.clone(), a as f32, b as f32))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        self.affine(1.0, s)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn sqr(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(unary(self, f32::exp), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(unary(self, f32::ln), self.shape().to_vec(), Op::Ln(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(unary(self, f32::sqrt), self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_op(unary(self, |v| v.max(0.0)), self.shape().to_vec(), Op::Relu(self.clone()))
    }

    pub fn silu(&self) -> Tensor {
        let d = unary(self, |v| v / (1.0 + (-v).exp()));
        Tensor::from_op(d, self.shape().to_vec(), Op::Silu(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        Tensor::from_op(unary(self, f32::abs), self.shape().to_vec(), Op::Abs(self.clone()))
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let d = unary(self, |v| v.clamp(lo, hi));
        Tensor::from_op(d, self.shape().to_vec(), Op::Clamp(self.clone(), lo, hi))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel().max(1) as f32)
    }

    fn sum_axis_impl(&self, axis: usize, keepdim: bool) -> Tensor {
        let shape = self.shape();
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Tensor::from_op(out, out_shape, Op::SumAxis(self.clone(), axis))
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        self.sum_axis_impl(axis, false)
    }

    pub fn sum_keepdim(&self, axis: usize) -> Tensor {
        self.sum_axis_impl(axis, true)
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.dim(axis) as f32;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn mean_keepdim(&self, axis: usize) -> Tensor {
        let n = self.dim(axis) as f32;
        self.sum_keepdim(axis).scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        let node = self.node();
        if !node.requires_grad {
            return Tensor(Arc::new(crate::Node {
                id: crate::next_id(),
                shape: shape.to_vec(),
                data: Arc::clone(&node.data),
                requires_grad: false,
                op: Op::Leaf,
            }));
        }
        Tensor(Arc::new(crate::Node {
            id: crate::next_id(),
            shape: shape.to_vec(),
            data: Arc::clone(&node.data),
            requires_grad: true,
            op: Op::Reshape(self.clone()),
        }))
    }

    pub fn unsqueeze(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        s.insert(axis, 1);
        self.reshape(&s)
    }

    pub fn squeeze(&self, axis: usize) -> Tensor {
        let mut s = self.shape().to_vec();
        assert_eq!(s[axis], 1, "squeeze of non-unit axis {axis} in {:?}", self.shape());
        s.remove(axis);
        self.reshape(&s)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permutation rank mismatch");
        let data = permute_data(self.data(), shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        Tensor::from_op(data, out_shape, Op::Permute(self.clone(), perm.to_vec()))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `ta`/`tb` read the corresponding operand as transposed. A rank-2 right
    /// operand is shared across all leading batch axes of the left one.
    pub fn matmul_t(&self, rhs: &Tensor, ta: bool, tb: bool) -> Tensor {
        let (a, b) = (self.shape(), rhs.shape());
        assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2: {a:?} x {b:?}");
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "matmul inner dims differ: {a:?} x {b:?} (ta={ta}, tb={tb})");
        let k = ka;
        let batch_a = &a[..a.len() - 2];
        let mut out_shape = batch_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0; numel(&out_shape)];
        if b.len() == 2 && a.len() > 2 {
            assert!(!ta, "shared right operand requires untransposed left operand");
            let rows = numel(batch_a) * m;
            gemm(rows, k, n, self.data(), false, rhs.data(), tb, &mut out, false);
        } else {
            assert_eq!(batch_a, &b[..b.len() - 2], "matmul batch dims differ: {a:?} x {b:?}");
            let batches = numel(batch_a);
            let (xa, xb) = (self.data(), rhs.data());
            for i in 0..batches {
                gemm(
                    m,
                    k,
                    n,
                    &xa[i * m * k..(i + 1) * m * k],
                    ta,
                    &xb[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        Tensor::from_op(
            out,
            out_shape,
            Op::MatMul {
                a: self.clone(),
                b: rhs.clone(),
                ta,
                tb,
            },
        )
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        self.matmul_t(rhs, false, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor {
        let n = *self.shape().last().expect("softmax of a scalar");
        let mut out = self.to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                softmax_row(row);
            }
        }
        Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    /// Replaces elements where `mask` is true by `value`; those positions
    /// receive no gradient.
    pub fn masked_fill(&self, mask: Arc<Vec<bool>>, value: f32) -> Tensor {
        assert_eq!(mask.len(), self.numel(), "mask length mismatch");
        let out = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::MaskedFill(self.clone(), mask))
    }

    pub fn concat(xs: &[Tensor], axis: usize) -> Tensor {
        assert!(!xs.is_empty(), "concat of zero tensors");
        let first = xs[0].shape();
        let mut out_shape = first.to_vec();
        out_shape[axis] = 0;
        for x in xs {
            let s = x.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&p, &q)) in s.iter().zip(first).enumerate() {
                assert!(i == axis || p == q, "concat shape mismatch {s:?} vs {first:?}");
            }
            out_shape[axis] += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for x in xs {
                let chunk = x.dim(axis) * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(out, out_shape, Op::Concat(xs.to_vec(), axis))
    }

    pub fn stack(xs: &[Tensor], axis: usize) -> Tensor {
        let v: Vec<Tensor> = xs.iter().map(|x| x.unsqueeze(axis)).collect();
        Tensor::concat(&v, axis)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range on {shape:?}");
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let n = shape[axis];
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op(out, out_shape, Op::Narrow(self.clone(), axis, start))
    }

    /// 2×2 average pooling over the last two axes of a `(.., H, W)` tensor.
    pub fn avg_pool2(&self) -> Tensor {
        let s = self.shape();
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims: {s:?}");
        let planes = numel(&s[..r - 2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            let src = &x[p * h * w..];
            let dst = &mut out[p * ho * wo..];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut out_shape = s.to_vec();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Tensor::from_op(out, out_shape, Op::AvgPool2(self.clone()))
    }

    /// Nearest-neighbour 2× upsampling over the last two axes.
    pub fn upsample2(&self) -> Tensor {
        let s = self.shape();
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = numel(&s[..r - 2]);
        let (ho, wo) = (h * 2, w * 2);
        let x = self.data();
        let mut out = vec![0.0; planes * ho * wo];
        for p in 0..planes {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let mut out_shape = s.to_vec();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        Tensor::from_op(out, out_shape, Op::Upsample2(self.clone()))
    }

    /// Row lookup into a `(vocab, dim)` table. Output shape is
    /// `ids_shape ++ [dim]`.
    pub fn embedding(table: &Tensor, ids: &[usize], ids_shape: &[usize]) -> Tensor {
        assert_eq!(table.rank(), 2, "embedding table must be rank 2");
        assert_eq!(numel(ids_shape), ids.len(), "ids do not match ids_shape");
        let (vocab, dim) = (table.dim(0), table.dim(1));
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            assert!(i < vocab, "token id {i} out of vocabulary {vocab}");
            out.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        Tensor::from_op(out, shape, Op::Embedding(table.clone(), Arc::new(ids.to_vec())))
    }
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn permute_data(x: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let own = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let zero = vec![0; shape.len()];
    let mut out = vec![0.0; x.len()];
    for_each2(&out_shape, &src_strides, &zero, |o, i, _| out[o] = x[i]);
    out
}
