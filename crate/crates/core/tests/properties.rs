//! Property tests over masks, the scale bound, blocks and the experiment helpers.

use proptest::prelude::*;

use quar_core::experiments::{
    bits_per_dim, build_chain, density_grid, gen_dataset, latent_trace, DatasetKind, DatasetSpec, ModelSpec,
};
use quar_core::flows::oracle::exact_logdet_bruteforce;
use quar_core::flows::scale::scale_forward;
use quar_core::flows::{PassCounter, QuarBlock, ThetaMode};
use quar_core::masking::{build_dense_masks, mask_reachability_check};
use quar_core::{FlowChain, GroupedLayout, MaskMode, RngState};

fn layout() -> impl Strategy<Value = GroupedLayout> {
    (1usize..7, proptest::collection::vec(1usize..5, 1..4)).prop_map(|(d, m)| GroupedLayout::new(d, m).unwrap())
}

fn block(dim: usize, seed: u64, theta: ThetaMode) -> QuarBlock {
    let mut rng = RngState::new(seed);
    let mut b = QuarBlock::new(GroupedLayout::new(dim, vec![2, 3]).unwrap(), 0.97, theta, &mut rng).unwrap();
    for l in b.layers.iter_mut() {
        for w in l.weight.values_mut() {
            *w += 0.3 * rng.normal();
        }
        for v in l.bias.iter_mut() {
            *v = 0.3 * rng.normal();
        }
    }
    b.refresh_spectral(&mut rng, 2000, 1e-12).unwrap();
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quar_masks_are_lower_triangular(layout in layout()) {
        let reach = mask_reachability_check(&build_dense_masks(&layout, MaskMode::Quar).unwrap()).unwrap();
        for d2 in 0..layout.dim {
            for d1 in 0..layout.dim {
                if d1 > d2 {
                    prop_assert_eq!(reach.get(d2, d1), 0.0);
                }
            }
            prop_assert_eq!(reach.get(d2, d2), 1.0);
        }
    }

    #[test]
    fn ar_masks_are_strictly_lower_triangular(layout in layout()) {
        let reach = mask_reachability_check(&build_dense_masks(&layout, MaskMode::Ar).unwrap()).unwrap();
        for d2 in 0..layout.dim {
            for d1 in d2..layout.dim {
                prop_assert_eq!(reach.get(d2, d1), 0.0);
            }
        }
    }

    #[test]
    fn scaled_branch_respects_sigma(
        raw in proptest::collection::vec(-5.0f64..5.0, 1..4),
        rho in proptest::collection::vec(-8.0f64..8.0, 1..5),
        sigma in 0.1f64..0.99,
    ) {
        for mode in [ThetaMode::Learnable, ThetaMode::FrozenZero] {
            let parts = scale_forward(&raw, &rho, mode, sigma);
            for s in &parts.s {
                prop_assert!(s * parts.prod <= sigma * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn block_logdet_matches_bruteforce(dim in 1usize..6, seed in 0u64..1000) {
        let b = block(dim, seed, ThetaMode::Learnable);
        let prep = b.prepare();
        let x = RngState::new(seed + 1).normal_vec(dim);
        let counter = PassCounter::default();
        let (_, ld, _) = b.forward(&prep, &x, &counter).unwrap();
        let oracle = exact_logdet_bruteforce(|v| Ok(b.forward(&prep, v, &counter)?.0), &x).unwrap();
        prop_assert!((ld - oracle).abs() < 1e-7, "{} vs {}", ld, oracle);
    }

    #[test]
    fn block_inverts(dim in 1usize..6, seed in 0u64..1000, frozen in any::<bool>()) {
        let theta = if frozen { ThetaMode::FrozenZero } else { ThetaMode::Learnable };
        let b = block(dim, seed, theta);
        let prep = b.prepare();
        let x: Vec<f64> = RngState::new(seed + 2).normal_vec(dim).iter().map(|v| 3.0 * v).collect();
        let (y, _, _) = b.forward(&prep, &x, &PassCounter::default()).unwrap();
        let back = b.inverse(&prep, &y, 1e-13, 10_000).unwrap();
        for (a, e) in back.x.iter().zip(&x) {
            prop_assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn bpd_is_affine_in_logp(logp in -50.0f64..50.0, log_q in -50.0f64..0.0, d in 1usize..100) {
        let bpd = bits_per_dim(logp, log_q, d);
        prop_assert!((bits_per_dim(logp + 1.0, log_q, d) - (bpd - 1.0 / (d as f64 * std::f64::consts::LN_2))).abs() < 1e-9);
        prop_assert_eq!(bits_per_dim(log_q, log_q, d), 0.0);
    }

    #[test]
    fn datasets_depend_only_on_spec(seed in 0u64..10_000) {
        let spec = DatasetSpec { kind: DatasetKind::EightGaussians { radius: 4.0, std: 0.5 }, train_size: 20, heldout_size: 5, seed };
        prop_assert_eq!(gen_dataset(&spec).unwrap(), gen_dataset(&spec).unwrap());
    }
}

#[test]
fn empty_chain_grid_is_the_standard_normal() {
    let chain = FlowChain::new(2, vec![]).unwrap();
    let grid = density_grid(&chain, [-8.0, 8.0, -8.0, 8.0], 160).unwrap();
    assert!((grid.integral() - 1.0).abs() < 1e-6);
    assert_eq!(grid.flagged_count(), 0);
    let c = grid.center(80, 80);
    let expected = -std::f64::consts::LN_2 - std::f64::consts::PI.ln() - 0.5 * (c[0] * c[0] + c[1] * c[1]);
    assert!((grid.values[80 * 160 + 80] - expected).abs() < 1e-12);
}

#[test]
fn trace_records_every_step() {
    let spec = ModelSpec::Quar {
        dim: 2,
        flows: 3,
        multipliers: vec![2],
        sigma: 0.97,
        theta: ThetaMode::Learnable,
        reverse: true,
    };
    let mut rng = RngState::new(4);
    let chain = build_chain(&spec, &mut rng).unwrap();
    let kind = DatasetKind::EightGaussians { radius: 4.0, std: 0.5 };
    let trace = latent_trace(&chain, &kind, 3, &mut rng).unwrap();
    assert_eq!(trace.points.len(), 24);
    assert_eq!(trace.steps, chain.steps.len() + 1);
    let prep = chain.prepare().unwrap();
    for p in &trace.points {
        assert_eq!(p.coords.len(), trace.steps);
        let z = chain.forward_one(&prep, &[p.coords[0][0], p.coords[0][1]], false).unwrap().z;
        let last = p.coords.last().unwrap();
        assert_eq!([z[0], z[1]], *last);
    }
    let csv = trace.to_csv();
    assert!(csv.starts_with("label,step,x,y\n"));
    assert_eq!(csv.lines().count(), 1 + 24 * trace.steps);
}
