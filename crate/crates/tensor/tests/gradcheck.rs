//! Central finite-difference checks for every differentiable op.

use std::sync::Arc;

use kvmix_tensor::{Conv2dOpts, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Projects the op output onto a fixed random direction so every output
/// element contributes to the scalar.
fn project(out: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_vec(rand_vec(&mut rng, out.numel(), -1.0, 1.0), out.shape());
    out.mul(&r).sum_all()
}

fn check<F>(inputs: Vec<(Vec<f32>, Vec<usize>)>, f: F)
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let vars: Vec<Tensor> = inputs.iter().map(|(d, s)| Tensor::var(d.clone(), s)).collect();
    let out = f(&vars);
    let loss = project(&out, 99);
    let grads = loss.backward();
    let h = 1e-2f32;
    for (k, (data, shape)) in inputs.iter().enumerate() {
        let analytic = grads.get(&vars[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; data.len()]);
        for i in 0..data.len() {
            let eval = |delta: f32| {
                let consts: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (d, s))| {
                        let mut d = d.clone();
                        if j == k {
                            d[i] += delta;
                        }
                        Tensor::from_vec(d, s)
                    })
                    .collect();
                project(&f(&consts), 99).item() as f64
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-1);
            assert!(
                err < 2e-2,
                "input {k} {shape:?} coord {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn broadcast_arithmetic() {
    let mut r = rng();
    let a = (rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 3, 4]);
    let b = (rand_vec(&mut r, 4, 0.5, 1.5), vec![4]);
    let c = (rand_vec(&mut r, 6, 0.5, 1.5), vec![2, 3, 1]);
    check(vec![a.clone(), b.clone(), c.clone()], |t| {
        t[0].add(&t[1]).mul(&t[2]).sub(&t[1]).div(&t[2].add_scalar(1.0))
    });
}

#[test]
fn linear_combination() {
    let mut r = rng();
    let a = (rand_vec(&mut r, 12, -1.0, 1.0), vec![3, 4]);
    let b = (rand_vec(&mut r, 12, -1.0, 1.0), vec![3, 4]);
    check(vec![a, b], |t| t[0].lincomb(0.3, &t[1], -2.5).mul(&t[0]));
}

#[test]
fn lincomb_rounds_once() {
    let x = Tensor::from_vec(vec![1.0 + f32::EPSILON], &[1]);
    let y = Tensor::from_vec(vec![-1.0], &[1]);
    // Exact in f64: (1 + eps) * 1e3 - 1e3 = 1e3 * eps.
    let z = x.lincomb(1e3, &y, 1e3);
    assert_eq!(z.item(), (1e3 * f32::EPSILON as f64) as f32);
}

#[test]
fn tiny_denominator_keeps_gradient_finite() {
    // y * y underflows to zero here; the ratio and its gradient do not.
    let x = Tensor::var(vec![3e-25], &[1]);
    let y = Tensor::var(vec![4e-25], &[1]);
    let g = x.div(&y).sum_all().backward();
    let (gx, gy) = (g.get(&x).unwrap()[0], g.get(&y).unwrap()[0]);
    assert!(((gx as f64) - 2.5e24).abs() < 1e18, "{gx}");
    assert!(((gy as f64) + 1.875e24).abs() < 1e18, "{gy}");
}

#[test]
fn unary_functions() {
    let mut r = rng();
    let pos = (rand_vec(&mut r, 12, 0.5, 2.0), vec![3, 4]);
    check(vec![pos.clone()], |t| t[0].ln().add(&t[0].sqrt()).add(&t[0].exp().scale(0.1)));
    let mixed = (rand_vec(&mut r, 12, -2.0, 2.0), vec![3, 4]);
    check(vec![mixed.clone()], |t| t[0].silu().add(&t[0].affine(0.5, 0.3).abs()));
    // Keep clear of the kinks for relu/clamp.
    let away: Vec<f32> = mixed.0.iter().map(|v| if v.abs() < 0.1 { 0.5 } else { *v }).collect();
    check(vec![(away, vec![3, 4])], |t| t[0].relu().add(&t[0].clamp(-1.0, 1.0)));
}

#[test]
fn reductions_and_layout() {
    let mut r = rng();
    let x = (rand_vec(&mut r, 60, -1.0, 1.0), vec![3, 4, 5]);
    check(vec![x.clone()], |t| t[0].sum_axis(1));
    check(vec![x.clone()], |t| t[0].mean_keepdim(2).add(&t[0]));
    check(vec![x.clone()], |t| t[0].permute(&[2, 0, 1]));
    check(vec![x.clone()], |t| t[0].reshape(&[12, 5]).transpose(0, 1));
    check(vec![x.clone()], |t| t[0].narrow(1, 1, 2));
    let y = (rand_vec(&mut r, 30, -1.0, 1.0), vec![3, 2, 5]);
    check(vec![x.clone(), y], |t| Tensor::concat(&[t[0].clone(), t[1].clone()], 1));
    check(vec![x], |t| t[0].sum_all().unsqueeze(0));
}

#[test]
fn matmul_variants() {
    let mut r = rng();
    for ta in [false, true] {
        for tb in [false, true] {
            let a_shape = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
            let b_shape = if tb { vec![2, 5, 4] } else { vec![2, 4, 5] };
            let a = (rand_vec(&mut r, 24, -1.0, 1.0), a_shape);
            let b = (rand_vec(&mut r, 40, -1.0, 1.0), b_shape);
            check(vec![a, b], |t| t[0].matmul_t(&t[1], ta, tb));
        }
    }
    for tb in [false, true] {
        let a = (rand_vec(&mut r, 24, -1.0, 1.0), vec![2, 3, 4]);
        let b_shape = if tb { vec![5, 4] } else { vec![4, 5] };
        let b = (rand_vec(&mut r, 20, -1.0, 1.0), b_shape);
        check(vec![a, b], |t| t[0].matmul_t(&t[1], false, tb));
    }
}

#[test]
fn softmax_and_masking() {
    let mut r = rng();
    let x = (rand_vec(&mut r, 20, -2.0, 2.0), vec![4, 5]);
    check(vec![x.clone()], |t| t[0].softmax());
    let mask: Vec<bool> = (0..20).map(|i| i % 3 == 0 && i % 5 != 0).collect();
    let mask = Arc::new(mask);
    check(vec![x], move |t| t[0].masked_fill(mask.clone(), f32::MIN).softmax());
}

#[test]
fn masked_softmax_is_exactly_zero() {
    let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.1], &[1, 4]);
    let y = x.masked_fill(Arc::new(vec![false, true, false, true]), f32::MIN).softmax();
    assert_eq!(y.data()[1], 0.0);
    assert_eq!(y.data()[3], 0.0);
    assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-6);
}

#[test]
fn convolutions() {
    let mut r = rng();
    let x = (rand_vec(&mut r, 2 * 3 * 6 * 6, -1.0, 1.0), vec![2, 3, 6, 6]);
    let w = (rand_vec(&mut r, 4 * 3 * 3 * 3, -0.5, 0.5), vec![4, 3, 3, 3]);
    let b = (rand_vec(&mut r, 4, -0.5, 0.5), vec![4]);
    for opts in [
        Conv2dOpts::same(3),
        Conv2dOpts {
            stride: 2,
            padding: 1,
            mode: Padding::Zeros,
        },
        Conv2dOpts {
            stride: 1,
            padding: 1,
            mode: Padding::Replicate,
        },
    ] {
        check(vec![x.clone(), w.clone(), b.clone()], move |t| {
            t[0].conv2d(&t[1], Some(&t[2]), opts)
        });
    }
}

#[test]
fn normalizations() {
    let mut r = rng();
    let x = (rand_vec(&mut r, 2 * 4 * 9, -1.0, 1.0), vec![2, 4, 9]);
    let g = (rand_vec(&mut r, 4, 0.5, 1.5), vec![4]);
    let b = (rand_vec(&mut r, 4, -0.5, 0.5), vec![4]);
    check(vec![x, g.clone(), b.clone()], |t| t[0].group_norm(2, &t[1], &t[2], 1e-5));
    let y = (rand_vec(&mut r, 3 * 4, -1.0, 1.0), vec![3, 4]);
    check(vec![y, g, b], |t| t[0].layer_norm(&t[1], &t[2], 1e-5));
}

#[test]
fn resampling_and_embedding() {
    let mut r = rng();
    let x = (rand_vec(&mut r, 2 * 4 * 4, -1.0, 1.0), vec![2, 1, 4, 4]);
    check(vec![x.clone()], |t| t[0].avg_pool2());
    check(vec![x], |t| t[0].upsample2());
    let table = (rand_vec(&mut r, 5 * 3, -1.0, 1.0), vec![5, 3]);
    check(vec![table], |t| Tensor::embedding(&t[0], &[1, 4, 1, 0], &[2, 2]));
}

#[test]
fn constants_build_no_graph() {
    let a = Tensor::ones(&[2, 2]);
    let b = a.add(&a).exp();
    assert!(!b.requires_grad());
    assert!(b.sum_all().backward().is_empty());
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Tensor::var(vec![3.0], &[1]);
    let y = x.mul(&x).add(&x);
    let g = y.sum_all().backward();
    assert!((g.get(&x).unwrap()[0] - 7.0).abs() < 1e-6);
}
