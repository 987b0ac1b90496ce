//! Randomized invariants over the public API.

use std::collections::BTreeMap;

use kvmix::attention::{shift_prompt_attention, MaskOverride};
use kvmix::checkpoint::{config_diff, Checkpoint, Stage};
use kvmix::config::{parse_config, RunConfig};
use kvmix::guidance::{build_override, connected_components, hungarian, Assignment, Segment};
use kvmix::image::MaskGrid;
use kvmix::model::ModelConfig;
use kvmix::params::ParamStore;
use kvmix::seeds::derive_seed;
use kvmix::trainer::bounded_xa_loss;
use kvmix::Tensor;
use proptest::prelude::*;

fn mask_strategy(side: usize) -> impl Strategy<Value = MaskGrid> {
    prop::collection::vec(any::<bool>(), side * side).prop_map(move |data| MaskGrid {
        height: side,
        width: side,
        data,
    })
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    let t: Vec<Vec<f64>>;
    let m = if r <= c {
        cost
    } else {
        t = (0..c).map(|j| (0..r).map(|i| cost[i][j]).collect()).collect();
        &t[..]
    };
    fn go(m: &[Vec<f64>], i: usize, used: &mut [bool]) -> f64 {
        if i == m.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(m[i][j] + go(m, i + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(m, 0, &mut vec![false; m[0].len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn hungarian_is_optimal(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let cost: Vec<Vec<f64>> = (0..r)
            .map(|i| (0..c).map(|j| ((derive_seed(seed, &[i as u64, j as u64]) % 2001) as f64 - 1000.0) / 250.0).collect())
            .collect();
        let (pairs, total) = hungarian(&cost).unwrap();
        prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
        prop_assert_eq!(pairs.len(), r.min(c));
        let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), pairs.len());
    }

    #[test]
    fn bounded_loss_stays_in_range(
        maps in prop::collection::vec(0.0f32..1.0, 3 * 16),
        masks in prop::collection::vec(mask_strategy(4), 3),
        alpha in 0.05f32..10.0,
    ) {
        let t = Tensor::from_vec(maps, &[3, 16]);
        let v = bounded_xa_loss(&t, &masks, alpha).unwrap().value.item();
        prop_assert!((0.0..=3.0 + 1e-6).contains(&v), "{}", v);
    }

    #[test]
    fn components_partition_the_mask(m in mask_strategy(7)) {
        let parts = connected_components(&m);
        let mut union = MaskGrid::empty(7, 7);
        for p in &parts {
            prop_assert!(!p.is_empty());
            prop_assert!(union.intersect(p).is_empty());
            union = union.union(p);
        }
        prop_assert_eq!(union, m);
    }

    #[test]
    fn override_always_leaves_a_prompt(
        segs in prop::collection::vec(mask_strategy(8), 1..4),
        extra_prompts in 0usize..3,
        dilation in 0usize..3,
    ) {
        let segments: Vec<Segment> = segs
            .into_iter()
            .filter(|m| !m.is_empty())
            .map(|mask| Segment { bbox: mask.bbox().unwrap(), area: mask.area(), mask })
            .collect();
        let objects = segments.len() + extra_prompts;
        let sigma: BTreeMap<usize, usize> = (0..segments.len()).map(|j| (j, j)).collect();
        let a = Assignment { sigma, ..Assignment::default() };
        let ov = build_override(objects + 1, &a, &segments, 8, dilation);
        prop_assert!(ov.validate().is_ok());
        for n in segments.len()..objects {
            prop_assert_eq!(ov.per_prompt_allowed[n].area(), 64);
        }
    }

    #[test]
    fn shifted_prompt_owns_its_destination(
        masks in prop::collection::vec(mask_strategy(6), 3),
        dx in -2i32..3,
        dy in -2i32..3,
    ) {
        let mut masks = masks;
        masks[2] = MaskGrid::full(6, 6);
        prop_assume!((dx, dy) != (0, 0) && !masks[0].translate(dx, dy).is_empty());
        let ov = MaskOverride::new(masks.clone());
        let moved = shift_prompt_attention(&ov, 0, dx, dy).unwrap();
        let dest = masks[0].translate(dx, dy);
        prop_assert_eq!(&moved.per_prompt_allowed[0], &dest);
        prop_assert!(moved.per_prompt_allowed[1].intersect(&dest).is_empty());
        prop_assert!(moved.validate().is_ok());
    }

    #[test]
    fn config_overrides_round_trip(alpha in 0.01f32..5.0, steps in 1u64..100_000, seed in any::<u32>()) {
        let text = format!("seed = {seed}\n[trainer]\nalpha = {alpha:?}\ntotal_steps = {steps}\n");
        let c = parse_config(&text).unwrap();
        prop_assert_eq!(c.trainer.alpha, alpha);
        prop_assert_eq!(c.trainer.total_steps, steps);
        prop_assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn checkpoint_round_trips(values in prop::collection::vec(-1e3f32..1e3, 1..40), step in any::<u32>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamStore::new();
        params.insert("unet.w", Tensor::from_vec(values.clone(), &[values.len()]));
        params.insert("enc_coarse.w", Tensor::from_vec(vec![0.25; 3], &[3]));
        let ck = Checkpoint {
            stage: Stage::Base,
            step: step as u64,
            mix: None,
            model_config: ModelConfig::default(),
            train_config: serde_json::json!({}),
            frozen_checksums: kvmix::checkpoint::frozen_checksums(&params, Stage::Base),
            params,
            optimizer: None,
        };
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path, Some(&ModelConfig::default())).unwrap();
        prop_assert_eq!(back.params.get("unet.w").data(), &values[..]);
        prop_assert_eq!(back.step, step as u64);
    }
}

#[test]
fn config_diff_names_changed_keys() {
    let a = RunConfig::default().model;
    let mut b = a.clone();
    b.denoiser.head_count = 2;
    b.adapters.tokens_per_prompt += 1;
    let d = config_diff(&a, &b);
    assert_eq!(d.len(), 2, "{d:?}");
    assert!(d.iter().all(|k| k.starts_with("model.")));
}
