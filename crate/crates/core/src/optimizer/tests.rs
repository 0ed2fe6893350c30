use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::losses::{LossWeights, DIRECTIONS};
use crate::synth::{ground_truth_motion, presets, render_scene};

#[test]
fn adam_zero_gradient_only_counts_the_step() {
    let mut x = vec![0.3, -1.2, 4.0];
    let before = x.clone();
    let mut s = AdamState::new(3, AdamHyper::default());
    adam_update(&mut x, &[0.0; 3], &mut s, &[]).unwrap();
    assert_eq!(x, before);
    assert_eq!(s.step, 1);
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let g = [3.0, -0.02, 1e-3, -250.0];
    let mut x = vec![0.0; 4];
    let mut s = AdamState::new(4, AdamHyper::default());
    adam_update(&mut x, &g, &mut s, &[]).unwrap();
    for (xi, gi) in x.iter().zip(g) {
        let exact = -1e-3 * gi / (gi.abs() + 1e-8);
        assert!(((xi - exact) / exact).abs() < 1e-12, "{xi} vs {exact}");
        // Only a gradient far above ε gives plain ±lr.
        if gi.abs() >= 0.01 {
            let want = -1e-3 * gi.signum();
            assert!(((xi - want) / want).abs() < 1e-6, "{xi} vs {want}");
        }
    }
}

#[test]
fn adam_two_steps_on_a_square() {
    // f(x) = x², x0 = 1, worked through the recurrence by hand.
    let mut x = vec![1.0];
    let mut s = AdamState::new(1, AdamHyper::default());
    let expected = [0.999000000005, 0.9980000262138343];
    for want in expected {
        let g = [2.0 * x[0]];
        adam_update(&mut x, &g, &mut s, &[]).unwrap();
        assert_abs_diff_eq!(x[0], want, epsilon = 1e-12);
    }
}

#[test]
fn adam_rejects_non_finite_gradients_untouched() {
    let mut params = ParamSet::zeros(4, 4);
    let mut grads = params.zeros_like();
    grads.fields[2].t0.y = f64::NAN;
    let before = params.clone();
    let mut s = AdamState::new(params.len(), AdamHyper::default());
    let e = adam_step(&mut params, &grads, &mut s, &GroupRates::uniform()).unwrap_err();
    match e {
        Error::NonFiniteGradient(name) => assert!(name.starts_with("Translation"), "{name}"),
        e => panic!("unexpected {e:?}"),
    }
    assert_eq!(params, before);
    assert_eq!(s.step, 0);
}

#[test]
fn adam_is_layout_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40;
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..5).map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let scale: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();

    let mut a = x0.clone();
    let mut sa = AdamState::new(n, AdamHyper::default());
    let mut b = pick(&x0);
    let mut sb = AdamState::new(n, AdamHyper::default());
    for g in &grads {
        adam_update(&mut a, g, &mut sa, &scale).unwrap();
        adam_update(&mut b, &pick(g), &mut sb, &pick(&scale)).unwrap();
    }
    assert_eq!(pick(&a), b);
}

#[test]
fn group_rates_scale_each_group() {
    let mut params = ParamSet::zeros(2, 2);
    let mut grads = params.zeros_like();
    grads.depth_logits[0].data_mut().fill(1.0);
    grads.fields[0].r0.x = 1.0;
    grads.fields[0].gate_logits.data_mut().fill(1.0);
    let rates = GroupRates {
        depth: 5.0,
        rotation: 0.0,
        translation: 1.0,
        residual: 1.0,
        gate: 2.0,
    };
    let mut s = AdamState::new(params.len(), AdamHyper::default());
    adam_step(&mut params, &grads, &mut s, &rates).unwrap();
    assert!((params.depth_logits[0].data()[0] + 5e-3).abs() < 1e-8);
    assert_eq!(params.fields[0].r0.x, 0.0);
    assert!((params.fields[0].gate_logits.data()[0] + 2e-3).abs() < 1e-8);
}

#[test]
fn pyramid_examples() {
    let img = ImageGrid::from_fn(6, 4, 2, |x, y, c| (x + 3 * y + c) as f64);
    assert_eq!(build_pyramid(&img, 1).unwrap(), vec![img.clone()]);

    let flat = ImageGrid::filled(16, 8, 3, 0.37);
    for level in build_pyramid(&flat, 4).unwrap() {
        assert!(level.data().iter().all(|&v| v == 0.37));
    }

    let checker = ImageGrid::from_fn(4, 4, 1, |x, y, _| ((x + y) % 2) as f64);
    let p = build_pyramid(&checker, 2).unwrap();
    assert_eq!(p[1], ImageGrid::filled(2, 2, 1, 0.5));

    assert!(build_pyramid(&checker, 4).is_err());
    assert!(build_pyramid(&checker, 0).is_err());
}

#[test]
fn pyramid_intrinsics_follow_the_images() {
    let k = Intrinsics::new(64.0, 60.0, 31.5, 31.5).unwrap();
    let ks = pyramid_intrinsics(&k, 3);
    assert_eq!(ks.len(), 3);
    assert_eq!(ks[0], k);
    // A pixel centre maps onto the centre of its 2×2 block.
    let kh = ks[1];
    assert_abs_diff_eq!(kh.fx, 32.0, epsilon = 1e-12);
    assert_abs_diff_eq!(kh.fy, 30.0, epsilon = 1e-12);
    assert_abs_diff_eq!(kh.cx, 15.5, epsilon = 1e-12);
    assert_abs_diff_eq!(ks[2].cx, 7.5, epsilon = 1e-12);
}

#[test]
fn upsampling_keeps_constants_and_poses() {
    let g = ImageGrid::filled(4, 3, 2, -0.25);
    assert_eq!(upsample(&g, 8, 6), ImageGrid::filled(8, 6, 2, -0.25));

    let mut p = ParamSet::from_init(4, 4, 1.7, &std::array::from_fn(|k| PoseSE3::from_translation(Vector3::new(k as f64, 0.0, 0.1))), -2.0);
    p.fields[1].r0 = Vector3::new(0.01, -0.02, 0.03);
    let up = upsample_params(&p, 8, 8);
    assert_eq!(up.width(), 8);
    for f in 0..3 {
        assert!(up.depth(f).data().iter().all(|d| (d - 1.7).abs() < 1e-12));
    }
    for (a, b) in p.fields.iter().zip(&up.fields) {
        assert_eq!(a.r0, b.r0);
        assert_eq!(a.t0, b.t0);
        assert!(b.gate_logits.data().iter().all(|&v| (v + 2.0).abs() < 1e-12));
    }
}

#[test]
fn level_budgets_split_the_total() {
    let cfg = OptimizerConfig::default();
    let b = cfg.level_budgets();
    assert_eq!(b.len(), cfg.levels);
    assert_eq!(b.iter().sum::<usize>(), cfg.budget);
    assert!(b.last().unwrap() >= b.first().unwrap());
    let bad = OptimizerConfig { budget: 0, ..OptimizerConfig::default() };
    assert!(bad.validate().is_err());
}

fn small_triplet(seed: u64) -> TripletFrames {
    let mut spec = presets::slanted_planes(16, 16);
    if let Some(p) = spec.planes.first_mut() {
        p.point.z += 0.01 * seed as f64;
    }
    let r: Vec<_> = (0..3).map(|f| render_scene(&spec, f).unwrap()).collect();
    TripletFrames::new([r[0].image.clone(), r[1].image.clone(), r[2].image.clone()], spec.intrinsics).unwrap()
}

fn quick_config(budget: usize) -> OptimizerConfig {
    OptimizerConfig {
        levels: 2,
        budget,
        rigid_warmup: 20,
        occlusion_warmup: 5,
        ..OptimizerConfig::default()
    }
}

#[test]
fn ground_truth_start_exits_early() {
    let (w, h) = (24, 16);
    let spec = presets::single_plane(w, h, 2.0, 2.0);
    let r: Vec<_> = (0..3).map(|f| render_scene(&spec, f).unwrap()).collect();
    let frames = TripletFrames::new([r[0].image.clone(), r[1].image.clone(), r[2].image.clone()], spec.intrinsics).unwrap();
    let poses = DIRECTIONS.map(|(a, b, _)| ground_truth_motion(&spec, a, b).unwrap().0);
    let init = ParamSet::from_init(w, h, 2.0, &poses, -40.0);
    let mut problem = TripletProblem::new(frames, LossOptions::default(), OptimizerConfig::default());
    problem.init = Some(init.clone());
    let sol = optimize_triplet(&problem).unwrap();
    assert!(sol.initial.total < 1e-8, "total at ground truth {}", sol.initial.total);
    assert_eq!(sol.status, Status::Converged);
    assert_eq!(sol.iterations, 0);
    assert!(sol.trace.is_empty());
    assert_eq!(sol.params, init);
}

#[test]
fn runs_are_deterministic_and_never_worse() {
    let problem = TripletProblem::new(small_triplet(0), LossOptions::default(), quick_config(80));
    let a = optimize_triplet(&problem).unwrap();
    let b = optimize_triplet(&problem).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.len(), 80);
    assert_eq!(a.status, Status::BudgetExhausted);
    assert!(a.final_loss.total <= a.initial.total);
    assert!(a.final_loss.total < 0.9 * a.initial.total, "{} -> {}", a.initial.total, a.final_loss.total);
    // Coarse rows come first.
    assert_eq!(a.trace[0].level, 1);
    assert_eq!(a.trace.last().unwrap().level, 0);
    assert!(a.trace.iter().enumerate().all(|(i, r)| r.iteration == i));
}

#[test]
fn convergence_waits_for_warmups_and_two_windows() {
    let cfg = |tolerance| OptimizerConfig {
        levels: 1,
        window: 4,
        tolerance,
        ..quick_config(100)
    };
    // Any change passes an infinite tolerance, so the first eligible check stops.
    let sol = optimize_triplet(&TripletProblem::new(small_triplet(1), LossOptions::default(), cfg(f64::INFINITY))).unwrap();
    assert_eq!(sol.status, Status::Converged);
    assert_eq!(sol.iterations, 20 + 2 * 4);
    let sol = optimize_triplet(&TripletProblem::new(small_triplet(1), LossOptions::default(), cfg(0.0))).unwrap();
    assert_eq!(sol.status, Status::BudgetExhausted);
    assert_eq!(sol.iterations, 100);
}

#[test]
fn budget_of_one_logs_one_row() {
    let cfg = OptimizerConfig { levels: 1, budget: 1, ..OptimizerConfig::default() };
    let sol = optimize_triplet(&TripletProblem::new(small_triplet(0), LossOptions::default(), cfg)).unwrap();
    assert_eq!(sol.trace.len(), 1);
    assert_eq!(sol.status, Status::BudgetExhausted);
}

#[test]
fn divergence_keeps_the_last_finite_state() {
    let mut cfg = quick_config(30);
    cfg.adam.lr = 1e308;
    let sol = optimize_triplet(&TripletProblem::new(small_triplet(0), LossOptions::default(), cfg)).unwrap();
    assert_eq!(sol.status, Status::Diverged);
    assert!(sol.diagnostic.is_some());
    assert!(sol.params.first_non_finite().is_none());
    assert!(sol.final_loss.total.is_finite());
    assert!(sol.final_loss.total <= sol.initial.total);
}

#[test]
fn many_matches_one_by_one() {
    let problems: Vec<_> = (0..3)
        .map(|s| TripletProblem::new(small_triplet(s), LossOptions::default(), quick_config(30)))
        .collect();
    let together = optimize_many(&problems);
    for (p, r) in problems.iter().zip(together) {
        assert_eq!(r.unwrap(), optimize_triplet(p).unwrap());
    }
}

#[test]
fn sequence_triplets_overlap_by_two() {
    let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
    let frames: Vec<_> = (0..5).map(|i| ImageGrid::filled(8, 8, 3, i as f64 * 0.1)).collect();
    let t = sequence_triplets(&frames, &k).unwrap();
    assert_eq!(t.len(), 3);
    assert_eq!(t[1].images[0], frames[1]);
    assert_eq!(t[2].images[2], frames[4]);
    assert!(sequence_triplets(&frames[..2], &k).is_err());
}

#[test]
fn sequence_anchors_follow_the_previous_triplet() {
    let t = vec![small_triplet(0), small_triplet(1)];
    let cfg = quick_config(20);
    let sols = optimize_sequence(&t, &LossOptions::default(), &cfg).unwrap();
    assert_eq!(sols.len(), 2);
    assert_eq!(sols[0], optimize_triplet(&TripletProblem::new(t[0].clone(), LossOptions::default(), cfg.clone())).unwrap());
    let d = sols[0].depths();
    let anchored = t[1].clone().with_anchor(0, d[1].clone()).unwrap().with_anchor(1, d[2].clone()).unwrap();
    assert_eq!(sols[1], optimize_triplet(&TripletProblem::new(anchored, LossOptions::default(), cfg)).unwrap());
}

fn solution_with(poses: [PoseSE3; 4], depth: f64) -> TripletSolution {
    let params = ParamSet::from_init(4, 4, depth, &poses, -2.0);
    let b = LossBreakdown {
        photometric: 0.0,
        ssim: 0.0,
        smoothness: 0.0,
        scale_consistency: 0.0,
        cycle: 0.0,
        residual_reg: 0.0,
        total: 0.0,
        weights: LossWeights::default(),
        pairs: Vec::new(),
    };
    TripletSolution {
        params,
        trace: Vec::new(),
        status: Status::Converged,
        iterations: 0,
        initial: b.clone(),
        final_loss: b,
        diagnostic: None,
    }
}

#[test]
fn chain_of_one_triplet_starts_at_identity() {
    // Camera moves +x by 0.1 per frame, so points move −x.
    let step = PoseSE3::from_translation(Vector3::new(-0.1, 0.0, 0.0));
    let poses = DIRECTIONS.map(|(a, b, _)| match (a, b) {
        (1, 0) | (2, 1) => step.inverse(),
        _ => step.clone(),
    });
    let c = chain_sequence(&[solution_with(poses, 1.0)]).unwrap();
    assert_eq!(c.trajectory.len(), 3);
    assert!(c.scale_ratios.is_empty());
    let p = c.trajectory.poses();
    assert_eq!(p[0], PoseSE3::identity());
    assert_abs_diff_eq!(p[2].translation().x, 0.2, epsilon = 1e-12);
}

#[test]
fn chain_of_static_triplets_stays_put() {
    let id = PoseSE3::identity();
    let sols: Vec<_> = (0..4).map(|_| solution_with(std::array::from_fn(|_| id.clone()), 1.3)).collect();
    let c = chain_sequence(&sols).unwrap();
    assert_eq!(c.trajectory.len(), 6);
    for p in c.trajectory.poses() {
        assert!(p.translation().norm() < 1e-15);
        assert!((p.rotation() - nalgebra::Matrix3::identity()).norm() < 1e-15);
    }
    assert_eq!(c.scale_ratios, vec![1.0; 3]);
    assert_eq!(c.max_ratio_deviation(), 0.0);
}

#[test]
fn chain_reports_scale_ratios_and_rejects_bad_input() {
    let id = PoseSE3::identity();
    let sols = vec![solution_with(std::array::from_fn(|_| id.clone()), 1.0), solution_with(std::array::from_fn(|_| id.clone()), 1.1)];
    let c = chain_sequence(&sols).unwrap();
    assert_abs_diff_eq!(c.scale_ratios[0], 1.1, epsilon = 1e-12);
    assert_abs_diff_eq!(c.max_ratio_deviation(), 0.1, epsilon = 1e-12);
    assert!(chain_sequence(&[]).is_err());
    let mut odd = sols.clone();
    odd[1].params = ParamSet::from_init(8, 4, 1.0, &std::array::from_fn(|_| id.clone()), -2.0);
    assert!(chain_sequence(&odd).is_err());
}

#[test]
fn direction_error_examples() {
    let x = Vector3::new(1.0, 0.0, 0.0);
    assert_eq!(direction_error_deg(&x, &(x * 3.0)), 0.0);
    assert_abs_diff_eq!(direction_error_deg(&x, &Vector3::new(0.0, 2.0, 0.0)), 90.0, epsilon = 1e-12);
    assert_abs_diff_eq!(direction_error_deg(&x, &-x), 180.0, epsilon = 1e-12);
}
