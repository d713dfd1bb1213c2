use quar_core::experiments::{build_chain, ModelSpec};
use quar_core::flows::ThetaMode;
use quar_core::training::gradcheck::grad_check;
use quar_core::training::nll_and_gradients;
use quar_core::{FlowChain, RngState};

const TOL: f64 = 1e-4;

fn perturb(chain: &mut FlowChain, rng: &mut RngState, scale: f64) {
    chain.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v += scale * rng.normal()));
}

fn ready(spec: &ModelSpec, seed: u64) -> (FlowChain, Vec<Vec<f64>>) {
    let mut rng = RngState::new(seed);
    let mut chain = build_chain(spec, &mut rng).unwrap();
    let batch: Vec<Vec<f64>> = (0..6).map(|_| rng.normal_vec(spec.dim())).collect();
    chain.init_actnorms(&batch).unwrap();
    perturb(&mut chain, &mut rng, 0.1);
    (chain, batch)
}

fn check(spec: &ModelSpec) {
    for seed in 0..5 {
        let (chain, batch) = ready(spec, seed);
        let report = grad_check(&chain, &batch, 1e-5).unwrap();
        for g in &report.groups {
            assert!(
                g.max_rel_error < TOL,
                "seed {seed} group {} err {:e} at {}",
                g.name,
                g.max_rel_error,
                g.worst_index
            );
        }
    }
}

#[test]
fn quar_chain_learnable_theta() {
    check(&ModelSpec::Quar {
        dim: 2,
        flows: 2,
        multipliers: vec![3, 3],
        sigma: 0.9,
        theta: ThetaMode::Learnable,
        reverse: true,
    });
}

#[test]
fn quar_chain_frozen_theta_three_dims() {
    check(&ModelSpec::Quar {
        dim: 3,
        flows: 2,
        multipliers: vec![2],
        sigma: 0.97,
        theta: ThetaMode::FrozenZero,
        reverse: true,
    });
}

#[test]
fn affine_ar_chain() {
    check(&ModelSpec::AffineAr { dim: 3, flows: 2, multipliers: vec![3], reverse: true });
}

#[test]
fn residual_chain() {
    check(&ModelSpec::Residual { dim: 2, flows: 2, hidden: vec![5, 5], coeff: 0.9, reverse: false });
}

#[test]
fn conv_quar_chain() {
    let spec = ModelSpec::ConvQuar {
        channels: 1,
        side: 2,
        blocks_per_scale: 1,
        multipliers: vec![2],
        kernels: vec![3, 1],
        sigma: 0.9,
        theta: ThetaMode::Learnable,
        logit_alpha: 0.05,
    };
    for seed in 0..5 {
        let mut rng = RngState::new(seed);
        let mut chain = build_chain(&spec, &mut rng).unwrap();
        let batch: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.uniform_range(0.05, 0.95)).collect()).collect();
        chain.init_actnorms(&batch).unwrap();
        perturb(&mut chain, &mut rng, 0.1);
        let report = grad_check(&chain, &batch, 1e-5).unwrap();
        assert!(report.max_rel_error < TOL, "seed {seed}: {report:?}");
    }
}

#[test]
fn zero_weight_quar_chain_is_the_base_nll() {
    let spec = ModelSpec::Quar {
        dim: 2,
        flows: 1,
        multipliers: vec![2],
        sigma: 0.9,
        theta: ThetaMode::Learnable,
        reverse: false,
    };
    let mut rng = RngState::new(1);
    let mut chain = build_chain(&spec, &mut rng).unwrap();
    chain.visit_params_mut(&mut |name, p| {
        if name.contains("quar.layers") {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    for step in chain.steps.iter_mut() {
        if let quar_core::FlowStep::ActNorm(a) = step {
            a.initialized = true;
        }
    }
    let batch: Vec<Vec<f64>> = (0..8).map(|_| rng.normal_vec(2)).collect();
    let (loss, grads, tape) = nll_and_gradients(&chain, &batch).unwrap();
    let base: f64 = batch.iter().map(|x| -quar_core::flows::standard_normal_logpdf(x)).sum::<f64>() / 8.0;
    assert!((loss - base).abs() < 1e-12);
    assert_eq!(tape.replay(&chain).unwrap().to_bits(), loss.to_bits());
    // rho only reaches the loss through s * F, which is zero here
    let mut i = 0;
    chain.visit_params(&mut |name, _, v| {
        if name.ends_with("rho") {
            assert!(grads[i..i + v.len()].iter().all(|g| *g == 0.0), "{name}");
        }
        i += v.len();
    });
}

#[test]
fn masked_entries_get_zero_gradient_and_do_not_move_the_loss() {
    let spec = ModelSpec::Quar {
        dim: 3,
        flows: 1,
        multipliers: vec![2],
        sigma: 0.9,
        theta: ThetaMode::Learnable,
        reverse: false,
    };
    let (chain, batch) = ready(&spec, 4);
    let (loss, grads, _) = nll_and_gradients(&chain, &batch).unwrap();
    let quar_core::FlowStep::Quar(block) = &chain.steps[1] else { panic!("layout") };
    let masks: Vec<_> = block.layers.iter().map(|l| l.mask.clone()).collect();
    let mut offset = 0;
    let mut checked = 0;
    let mut hits = Vec::new();
    chain.visit_params(&mut |name, _, v| {
        if let Some(rest) = name.strip_prefix("steps.1.quar.layers.") {
            if let Some(l) = rest.strip_suffix(".weight") {
                let mask = &masks[l.parse::<usize>().unwrap()];
                for (k, m) in mask.values().iter().enumerate() {
                    if *m == 0.0 {
                        hits.push(offset + k);
                    }
                }
            }
        }
        offset += v.len();
    });
    let base = chain.flat_params();
    for &i in &hits {
        assert_eq!(grads[i], 0.0);
        let mut p = base.clone();
        p[i] += 0.7;
        let mut moved = chain.clone();
        moved.set_flat_params(&p).unwrap();
        assert_eq!(moved.mean_nll(&batch).unwrap().to_bits(), loss.to_bits());
        checked += 1;
    }
    assert!(checked > 0);
}
