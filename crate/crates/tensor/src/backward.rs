use std::collections::{HashMap, HashSet};

use crate::conv::{col2im, im2col, Geometry};
use crate::gemm::gemm;
use crate::norm::norm_backward;
use crate::ops::{broadcast_shape, broadcast_strides, for_each2, permute_data, reduce_to};
use crate::{numel, Node, Op, Tensor};

/// Gradients of a scalar with respect to every tracked leaf it depends on.
#[derive(Default)]
pub struct Gradients {
    map: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient as a constant tensor of `t`'s shape.
    pub fn tensor(&self, t: &Tensor) -> Option<Tensor> {
        self.get(t).map(|g| Tensor::from_vec(g.to_vec(), t.shape()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn accumulate(grads: &mut HashMap<u64, Vec<f32>>, t: &Tensor, g: Vec<f32>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(t.id(), g);
        }
    }
}

impl Tensor {
    /// Reverse-mode sweep from this one-element tensor.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() needs a scalar, got {:?}", self.shape());
        if !self.requires_grad() {
            return Gradients::default();
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.node().op.inputs() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        let mut leaves = HashMap::new();
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            let node = t.node();
            if matches!(node.op, Op::Leaf) {
                leaves.insert(t.id(), g);
            } else {
                propagate(node, &g, &mut grads);
            }
        }
        Gradients { map: leaves }
    }
}

fn elementwise_pair(
    a: &Tensor,
    b: &Tensor,
    out: &[usize],
    g: &[f32],
    f: impl Fn(f32, f32, f32) -> (f32, f32),
) -> (Vec<f32>, Vec<f32>) {
    let (da, db) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let mut ga = vec![0.0; g.len()];
        let mut gb = vec![0.0; g.len()];
        for i in 0..g.len() {
            let (x, y) = f(g[i], da[i], db[i]);
            ga[i] = x;
            gb[i] = y;
        }
        return (ga, gb);
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let mut ga = vec![0.0; da.len()];
    let mut gb = vec![0.0; db.len()];
    for_each2(out, &sa, &sb, |o, i, j| {
        let (x, y) = f(g[o], da[i], db[j]);
        ga[i] += x;
        gb[j] += y;
    });
    (ga, gb)
}

fn propagate(node: &Node, g: &[f32], grads: &mut HashMap<u64, Vec<f32>>) {
    let out_shape = &node.shape;
    let y = node.data.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let out = broadcast_shape(a.shape(), b.shape());
            if a.requires_grad() {
                accumulate(grads, a, reduce_to(g, &out, a.shape()));
            }
            if b.requires_grad() {
                accumulate(grads, b, reduce_to(g, &out, b.shape()));
            }
        }
        Op::Sub(a, b) => {
            let out = broadcast_shape(a.shape(), b.shape());
            if a.requires_grad() {
                accumulate(grads, a, reduce_to(g, &out, a.shape()));
            }
            if b.requires_grad() {
                let mut gb = reduce_to(g, &out, b.shape());
                gb.iter_mut().for_each(|v| *v = -*v);
                accumulate(grads, b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ga, gb) = elementwise_pair(a, b, out_shape, g, |g, x, y| (g * y, g * x));
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
        Op::Div(a, b) => {
            let (ga, gb) =
                elementwise_pair(a, b, out_shape, g, |g, x, y| (g / y, -(g / y) * (x / y)));
            accumulate(grads, a, ga);
            accumulate(grads, b, gb);
        }
        Op::Affine(x, m) => accumulate(grads, x, g.iter().map(|v| v * m).collect()),
        Op::LinComb(a, b, ca, cb) => {
            accumulate(grads, a, g.iter().map(|v| v * ca).collect());
            accumulate(grads, b, g.iter().map(|v| v * cb).collect());
        }
        Op::Exp(x) => accumulate(grads, x, g.iter().zip(y).map(|(g, y)| g * y).collect()),
        Op::Ln(x) => accumulate(grads, x, g.iter().zip(x.data()).map(|(g, x)| g / x).collect()),
        Op::Sqrt(x) => {
            accumulate(grads, x, g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect())
        }
        Op::Relu(x) => accumulate(
            grads,
            x,
            g.iter()
                .zip(x.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        ),
        Op::Silu(x) => accumulate(
            grads,
            x,
            g.iter()
                .zip(x.data())
                .map(|(g, &x)| {
                    let s = 1.0 / (1.0 + (-x).exp());
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect(),
        ),
        Op::Abs(x) => accumulate(
            grads,
            x,
            g.iter()
                .zip(x.data())
                .map(|(g, &x)| {
                    if x > 0.0 {
                        *g
                    } else if x < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
        Op::Clamp(x, lo, hi) => accumulate(
            grads,
            x,
            g.iter()
                .zip(x.data())
                .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                .collect(),
        ),
        Op::SumAll(x) => accumulate(grads, x, vec![g[0]; x.numel()]),
        Op::SumAxis(x, axis) => {
            let s = x.shape();
            let outer = numel(&s[..*axis]);
            let n = s[*axis];
            let inner = numel(&s[axis + 1..]);
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                for k in 0..n {
                    dx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Reshape(x) => accumulate(grads, x, g.to_vec()),
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, x, permute_data(g, out_shape, &inv));
        }
        Op::MatMul { a, b, ta, tb } => matmul_backward(a, b, *ta, *tb, g, grads),
        Op::Softmax(x) => {
            let n = *out_shape.last().unwrap();
            let mut dx = vec![0.0; g.len()];
            for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    dxr[k] = yr[k] * (gr[k] - dot);
                }
            }
            accumulate(grads, x, dx);
        }
        Op::MaskedFill(x, mask) => accumulate(
            grads,
            x,
            g.iter()
                .zip(mask.iter())
                .map(|(g, m)| if *m { 0.0 } else { *g })
                .collect(),
        ),
        Op::Concat(xs, axis) => {
            let outer = numel(&out_shape[..*axis]);
            let inner = numel(&out_shape[axis + 1..]);
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for x in xs {
                let chunk = x.dim(*axis) * inner;
                if x.requires_grad() {
                    let mut dx = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        dx.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    accumulate(grads, x, dx);
                }
                offset += chunk;
            }
        }
        Op::Narrow(x, axis, start) => {
            let s = x.shape();
            let outer = numel(&s[..*axis]);
            let inner = numel(&s[axis + 1..]);
            let n = s[*axis];
            let len = out_shape[*axis];
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                dx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, x, dx);
        }
        Op::Conv2d { x, w, b, opts } => {
            let geo = Geometry::new(x.shape(), w.shape(), *opts);
            let batch = x.dim(0);
            let cout = w.dim(0);
            let (k, sp) = (geo.k(), geo.spatial_out());
            let in_len = geo.cin * geo.h * geo.w;
            let mut cols = vec![0.0; k * sp];
            let mut dcols = vec![0.0; k * sp];
            let mut dw = vec![0.0; w.numel()];
            let mut dx = vec![0.0; x.numel()];
            for n in 0..batch {
                let gn = &g[n * cout * sp..(n + 1) * cout * sp];
                if w.requires_grad() {
                    im2col(&x.data()[n * in_len..], &geo, &mut cols);
                    gemm(cout, sp, k, gn, false, &cols, true, &mut dw, true);
                }
                if x.requires_grad() {
                    gemm(k, cout, sp, w.data(), true, gn, false, &mut dcols, false);
                    col2im(&dcols, &geo, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
            if let Some(b) = b {
                if b.requires_grad() {
                    let mut db = vec![0.0; cout];
                    for n in 0..batch {
                        for (o, row) in g[n * cout * sp..(n + 1) * cout * sp].chunks(sp).enumerate() {
                            db[o] += row.iter().sum::<f32>();
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            accumulate(grads, w, dw);
            accumulate(grads, x, dx);
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        } => {
            let s = x.shape();
            let c = s[1];
            let spatial = numel(&s[2..]);
            let mut dx = vec![0.0; x.numel()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            norm_backward(
                x.data(),
                gamma.data(),
                stats,
                c / groups * spatial,
                g,
                |i| (i / spatial) % c,
                &mut dx,
                &mut dg,
                &mut db,
            );
            accumulate(grads, x, dx);
            accumulate(grads, gamma, dg);
            accumulate(grads, beta, db);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            stats,
        } => {
            let d = *x.shape().last().unwrap();
            let mut dx = vec![0.0; x.numel()];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            norm_backward(x.data(), gamma.data(), stats, d, g, |i| i % d, &mut dx, &mut dg, &mut db);
            accumulate(grads, x, dx);
            accumulate(grads, gamma, dg);
            accumulate(grads, beta, db);
        }
        Op::AvgPool2(x) => {
            let s = x.shape();
            let r = s.len();
            let (h, w) = (s[r - 2], s[r - 1]);
            let (ho, wo) = (h / 2, w / 2);
            let planes = numel(&s[..r - 2]);
            let mut dx = vec![0.0; x.numel()];
            for p in 0..planes {
                for yy in 0..ho {
                    for xx in 0..wo {
                        let v = 0.25 * g[p * ho * wo + yy * wo + xx];
                        let i = p * h * w + 2 * yy * w + 2 * xx;
                        dx[i] += v;
                        dx[i + 1] += v;
                        dx[i + w] += v;
                        dx[i + w + 1] += v;
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Upsample2(x) => {
            let s = x.shape();
            let r = s.len();
            let (h, w) = (s[r - 2], s[r - 1]);
            let (ho, wo) = (h * 2, w * 2);
            let planes = numel(&s[..r - 2]);
            let mut dx = vec![0.0; x.numel()];
            for p in 0..planes {
                for yy in 0..ho {
                    for xx in 0..wo {
                        dx[p * h * w + (yy / 2) * w + xx / 2] += g[p * ho * wo + yy * wo + xx];
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Embedding(table, ids) => {
            let dim = table.dim(1);
            let mut dt = vec![0.0; table.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for k in 0..dim {
                    dt[id * dim + k] += g[r * dim + k];
                }
            }
            accumulate(grads, table, dt);
        }
    }
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    g: &[f32],
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (sa, sb) = (a.shape(), b.shape());
    let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    if sb.len() == 2 && sa.len() > 2 {
        let rows = numel(&sa[..sa.len() - 2]) * m;
        if a.requires_grad() {
            let mut ga = vec![0.0; a.numel()];
            gemm(rows, n, k, g, false, b.data(), !tb, &mut ga, false);
            accumulate(grads, a, ga);
        }
        if b.requires_grad() {
            let mut gb = vec![0.0; b.numel()];
            if tb {
                gemm(n, rows, k, g, true, a.data(), false, &mut gb, false);
            } else {
                gemm(k, rows, n, a.data(), true, g, false, &mut gb, false);
            }
            accumulate(grads, b, gb);
        }
        return;
    }
    let batches = numel(&sa[..sa.len() - 2]);
    let (xa, xb) = (a.data(), b.data());
    if a.requires_grad() {
        let mut ga = vec![0.0; a.numel()];
        for i in 0..batches {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let bi = &xb[i * k * n..(i + 1) * k * n];
            let dst = &mut ga[i * m * k..(i + 1) * m * k];
            if ta {
                gemm(k, n, m, bi, tb, gi, true, dst, false);
            } else {
                gemm(m, n, k, gi, false, bi, !tb, dst, false);
            }
        }
        accumulate(grads, a, ga);
    }
    if b.requires_grad() {
        let mut gb = vec![0.0; b.numel()];
        for i in 0..batches {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &xa[i * m * k..(i + 1) * m * k];
            let dst = &mut gb[i * k * n..(i + 1) * k * n];
            if tb {
                gemm(n, m, k, gi, true, ai, ta, dst, false);
            } else {
                gemm(k, m, n, ai, !ta, gi, false, dst, false);
            }
        }
        accumulate(grads, b, gb);
    }
}
