//! Acceptance criteria 1–8.  Each test prints one `criterion N: PASS|FAIL`
//! line (run with `--nocapture` to see them) and then asserts.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use depthvo::eval::{depth_metrics, segment_rpe, umeyama_align, Sim3, SEGMENT_LENGTHS};
use depthvo::gradcheck::{run_all, CheckOptions};
use depthvo::losses::{depth_discrepancy, LossOptions, TripletFrames};
use depthvo::occlusion::{occlusion_mask, z_buffer_oracle};
use depthvo::optimizer::{
    chain_sequence, direction_error_deg, optimize_sequence, optimize_triplet, sequence_triplets, OptimizerConfig,
    TripletProblem,
};
use depthvo::synth::{ground_truth_motion, moving_mask, presets, render_scene, SceneSpec};
use depthvo::types::so3_exp;
use depthvo::{ImageGrid, Intrinsics, PoseSE3, Trajectory};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, detail: &str, elapsed: Duration) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict}  {detail}  ({:.1} s)", elapsed.as_secs_f64());
}

fn render_all(spec: &SceneSpec) -> Vec<depthvo::synth::Rendering> {
    (0..spec.frame_count()).map(|f| render_scene(spec, f).unwrap()).collect()
}

#[test]
fn criterion_1_gradient_suite() {
    let t = Instant::now();
    let reports = run_all(&CheckOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    let enough = reports.iter().all(|r| r.configurations >= 100);
    let ok = failed.is_empty() && enough && elapsed < Duration::from_secs(120);
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    report(
        1,
        ok,
        &format!("{} checks [{}], worst rel err {worst:.2e}, failing {failed:?}", reports.len(), names.join(", ")),
        elapsed,
    );
    assert!(ok);
}

/// Depth of a near rectangle `[x0, x1) × [y0, y1)` in front of a far wall.
fn rect_scene(x0: usize, x1: usize, y0: usize, y1: usize, near: f64, far: f64) -> ImageGrid {
    ImageGrid::from_fn(32, 32, 1, |x, y, _| {
        if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
            near
        } else {
            far
        }
    })
}

#[test]
fn criterion_2_occlusion_oracle_equivalence() {
    // Dyadic intrinsics, depths and baselines keep every projection exact and
    // every disparity a whole number of pixels, so both the d_n-neighbourhood
    // test and the splatting z-buffer see the same discretized surfaces.
    let t = Instant::now();
    let k = Intrinsics::new(32.0, 32.0, 15.5, 15.5).unwrap();
    let (mut equal, mut hidden_total) = (0, 0usize);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let near = [1.0, 2.0][rng.random_range(0..2)];
        let far = [4.0, 8.0][rng.random_range(0..2)];
        // Quarter-meter baselines: disparity 32·t/z is an integer.
        let tx = rng.random_range(-1i32..=1) as f64 * 0.25;
        let ty = rng.random_range(-1i32..=1) as f64 * 0.25;
        let pose = PoseSE3::from_translation(Vector3::new(tx, ty, 0.0));
        let shift = |z: f64| ((32.0 * tx / z) as isize, (32.0 * ty / z) as isize);
        let (x0, y0) = (rng.random_range(8..14), rng.random_range(8..14));
        let (x1, y1) = (x0 + rng.random_range(3..10), y0 + rng.random_range(3..10));
        let da = rect_scene(x0, x1, y0, y1, near, far);
        // The view from b: the rectangle moves by the near disparity; the far
        // wall is unbounded, so it stays far everywhere else.
        let (sx, sy) = shift(near);
        let mv = |v: usize, s: isize| (v as isize + s) as usize;
        let db = rect_scene(mv(x0, sx), mv(x1, sx), mv(y0, sy), mv(y1, sy), near, far);
        let m = occlusion_mask(&da, &db, &pose, &k, 1.0, 0.01).unwrap();
        let o = z_buffer_oracle(&da, &db, &pose, &k, 4, 0.01).unwrap();
        if m.mask == o.mask {
            equal += 1;
        }
        let valid_hidden = m.mask.data().iter().filter(|v| **v == 0.0).count();
        hidden_total += valid_hidden;
    }
    let elapsed = t.elapsed();
    let ok = equal == 100 && hidden_total > 0 && elapsed < Duration::from_secs(60);
    report(2, ok, &format!("{equal}/100 scenes equal, {hidden_total} masked pixels in total"), elapsed);
    assert!(ok);
}

#[test]
fn criterion_3_discrepancy_properties() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut in_range, mut self_zero, mut invariant) = (true, true, true);
    let mut worst_scale = 0.0f64;
    for _ in 0..1_000_000 {
        let a = 10f64.powf(rng.random_range(-3.0..3.0));
        let b = 10f64.powf(rng.random_range(-3.0..3.0));
        let d = depth_discrepancy(a, b);
        in_range &= (0.0..1.0).contains(&d);
        self_zero &= depth_discrepancy(a, a) == 0.0;
        let s = 10f64.powf(rng.random_range(-3.0..3.0));
        let dev = (depth_discrepancy(s * a, s * b) - d).abs();
        worst_scale = worst_scale.max(dev);
        invariant &= dev <= 1e-12;
    }
    let elapsed = t.elapsed();
    let ok = in_range && self_zero && invariant;
    report(
        3,
        ok,
        &format!("10^6 pairs: range {in_range}, D(a,a)=0 {self_zero}, worst scale deviation {worst_scale:.1e}"),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_4_synthetic_recovery() {
    let t = Instant::now();
    let spec = presets::slanted_planes(64, 64);
    let r = render_all(&spec);
    let frames = TripletFrames::new([r[0].image.clone(), r[1].image.clone(), r[2].image.clone()], spec.intrinsics).unwrap();
    let sol = optimize_triplet(&TripletProblem::new(frames, LossOptions::default(), OptimizerConfig::default())).unwrap();
    let elapsed = t.elapsed();
    let (mut dir_err, mut rot_err) = (0.0f64, 0.0f64);
    for (a, b) in [(1, 2), (1, 0)] {
        let (gt, _) = ground_truth_motion(&spec, a, b).unwrap();
        let est = sol.pose_between(a, b).unwrap();
        dir_err = dir_err.max(direction_error_deg(est.translation(), gt.translation()));
        rot_err = rot_err.max(est.compose(&gt.inverse()).rotation_angle().to_degrees());
    }
    let d = sol.depths();
    let abs_rel = depth_metrics(&d[1], &r[1].depth, None, true).unwrap().abs_rel;
    let others: Vec<String> = [0, 2]
        .iter()
        .map(|&f| format!("{:.3}", depth_metrics(&d[f], &r[f].depth, None, true).unwrap().abs_rel))
        .collect();
    let ok = dir_err < 5.0
        && rot_err < 0.5
        && abs_rel < 0.05
        && sol.iterations <= 2000
        && elapsed < Duration::from_secs(300);
    report(
        4,
        ok,
        &format!(
            "direction {dir_err:.2}°, rotation {rot_err:.3}°, target AbsRel {abs_rel:.4} (other frames {}), {} iterations, {:?}",
            others.join(" / "),
            sol.iterations,
            sol.status
        ),
        elapsed,
    );
    assert!(ok);
}

#[test]
fn criterion_5_scale_consistency_ablation() {
    let t = Instant::now();
    let spec = presets::corridor(64, 64);
    let images: Vec<ImageGrid> = render_all(&spec).into_iter().map(|r| r.image).collect();
    let triplets = sequence_triplets(&images, &spec.intrinsics).unwrap();
    assert_eq!(triplets.len(), 5);
    let run = |weight: f64| {
        let mut loss = LossOptions::default();
        loss.weights.scale_consistency = weight;
        let sols = optimize_sequence(&triplets, &loss, &OptimizerConfig::default()).unwrap();
        chain_sequence(&sols).unwrap()
    };
    let with = run(0.5);
    let without = run(0.0);
    let elapsed = t.elapsed();
    let in_band = with.scale_ratios.iter().all(|r| (0.98..=1.02).contains(r));
    let outside = without.max_ratio_deviation() > 0.02;
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(" ");
    let ok = in_band && outside && elapsed < Duration::from_secs(900);
    report(
        5,
        ok,
        &format!(
            "weight 0.5 ratios [{}] (max dev {:.4}); weight 0 ratios [{}] (max dev {:.4})",
            fmt(&with.scale_ratios),
            with.max_ratio_deviation(),
            fmt(&without.scale_ratios),
            without.max_ratio_deviation()
        ),
        elapsed,
    );
    assert!(ok);
}

fn straight_line(n: usize, step: f64) -> Trajectory {
    Trajectory::from_poses((0..n).map(|i| PoseSE3::from_translation(Vector3::new(0.0, 0.0, step * i as f64))).collect())
}

#[test]
fn criterion_6_evaluation_identities() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rv = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let est = Trajectory::from_poses((0..25).map(|_| PoseSE3::from_parts_projected(so3_exp(&rv()), rv() * 4.0)).collect());
    let truth = Sim3::new(1.7, so3_exp(&(rv() * 2.0)), rv() * 3.0).unwrap();
    let gt = truth.apply_trajectory(&est).unwrap();
    let got = umeyama_align(&est, &gt).unwrap();
    let sim_err = (got.scale() - truth.scale())
        .abs()
        .max((got.rotation() - truth.rotation()).abs().max())
        .max((got.translation() - truth.translation()).norm());
    let umeyama_ok = sim_err < 1e-6;

    let line = straight_line(500, 0.1);
    let scaled = straight_line(500, 0.101);
    let r = segment_rpe(&scaled, &line, &SEGMENT_LENGTHS).unwrap();
    let t_ok = r.rows.len() == 5 && r.rows.iter().all(|row| (row.t_err - 1.0).abs() < 1e-6);
    let yawed = Trajectory::from_poses(
        line.poses()
            .iter()
            .map(|p| PoseSE3::from_rotation_vector(Vector3::new(0.0, (p.translation().z / 100.0).to_radians(), 0.0), *p.translation()))
            .collect(),
    );
    let r = segment_rpe(&yawed, &line, &SEGMENT_LENGTHS).unwrap();
    let r_ok = r.rows.len() == 5 && r.rows.iter().all(|row| (row.r_err - 1.0).abs() < 1e-6);

    let g = ImageGrid::filled(8, 6, 1, 2.0);
    let m = depth_metrics(&g.map(|v| 2.0 * v), &g, None, false).unwrap();
    let hand = [1.0, 2.0, 2.0, 2f64.ln(), 0.0, 0.0, 0.0];
    let depth_ok = m.as_array() == hand;

    let self_traj = segment_rpe(&line, &line, &SEGMENT_LENGTHS).unwrap();
    let self_depth = depth_metrics(&g, &g, None, true).unwrap();
    let zero_ok = self_traj.rows.iter().all(|row| row.t_err == 0.0 && row.r_err == 0.0)
        && self_traj.t_err == 0.0
        && self_depth.as_array() == [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let ok = umeyama_ok && t_ok && r_ok && depth_ok && zero_ok;
    report(
        6,
        ok,
        &format!(
            "Umeyama err {sim_err:.1e}, 1% scale {t_ok}, 1°/100m yaw {r_ok}, pred=2·gt {depth_ok} {:?}, gt-vs-gt zero {zero_ok}",
            m.as_array()
        ),
        t.elapsed(),
    );
    assert!(ok);
}

#[test]
fn criterion_7_moving_object_gate() {
    let t = Instant::now();
    let spec = presets::moving_plane(64, 64);
    let r = render_all(&spec);
    let frames = TripletFrames::new([r[0].image.clone(), r[1].image.clone(), r[2].image.clone()], spec.intrinsics).unwrap();
    let problem = TripletProblem::new(frames, LossOptions::default(), OptimizerConfig::moving_objects());
    let sol = optimize_triplet(&problem).unwrap();
    let elapsed = t.elapsed();
    let mask = moving_mask(&spec, 1).unwrap();
    let mut ok = elapsed < Duration::from_secs(300);
    let mut detail = Vec::new();
    // Gates of the target frame towards the previous and the next frame.
    for k in [0, 2] {
        let gate = sol.gate(k);
        let (mut hit, mut moving, mut false_on, mut stat) = (0usize, 0usize, 0usize, 0usize);
        for (g, m) in gate.data().iter().zip(mask.data()) {
            if *m > 0.5 {
                moving += 1;
                hit += (*g > 0.5) as usize;
            } else {
                stat += 1;
                false_on += (*g > 0.5) as usize;
            }
        }
        let coverage = hit as f64 / moving as f64;
        let leak = false_on as f64 / stat as f64;
        ok &= coverage >= 0.8 && leak <= 0.05;
        detail.push(format!("direction {k}: moving {:.1}%, static {:.1}%", 100.0 * coverage, 100.0 * leak));
    }
    report(7, ok, &detail.join("; "), elapsed);
    assert!(ok);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_8_determinism() {
    let t = Instant::now();
    let bin = env!("CARGO_BIN_EXE_depthvo");
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let out = tmp.path().join("out");
    let status = Command::new(bin)
        .args(["synth-gen", "--width", "64", "--height", "64", "--seed", "7", "--out-dir"])
        .arg(&scene)
        .status()
        .unwrap();
    assert!(status.success());
    let optimize = || {
        Command::new(bin)
            .args(["optimize", "--budget", "200", "--seed", "7", "--input"])
            .arg(&scene)
            .arg("--out-dir")
            .arg(&out)
            .status()
            .unwrap()
            .code()
    };
    let first_code = optimize();
    let first = snapshot(&out);
    let second_code = optimize();
    let second = snapshot(&out);
    let identical = first == second;
    let ok = identical && first_code == second_code && matches!(first_code, Some(0) | Some(2)) && first.len() >= 6;
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    report(
        8,
        ok,
        &format!("{} files byte-identical: {identical} [{}], exit codes {first_code:?}/{second_code:?}", first.len(), names.join(", ")),
        t.elapsed(),
    );
    assert!(ok);
}
