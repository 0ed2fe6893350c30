use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthvo::io::{self, TrajectoryFormat};
use depthvo::{ImageGrid, PoseSE3, Trajectory};
use nalgebra::Vector3;

fn depthvo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthvo")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

fn read_csv(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth-gen", "--width", "32", "--height", "32", "--out-dir", path(dir)];
    args.extend_from_slice(extra);
    depthvo(&args)
}

fn helix(n: usize) -> Trajectory {
    let poses = (0..n)
        .map(|i| {
            let a = i as f64 * 0.05;
            PoseSE3::from_rotation_vector(Vector3::new(0.0, a, 0.0), Vector3::new(3.0 * a.cos(), 0.02 * i as f64, 3.0 * a.sin()))
        })
        .collect();
    Trajectory::new((0..n).map(|i| i as f64 * 0.1).collect(), poses).unwrap()
}

fn straight_line(n: usize, step: f64) -> Trajectory {
    let poses = (0..n).map(|i| PoseSE3::from_translation(Vector3::new(0.0, 0.0, step * i as f64))).collect();
    Trajectory::new((0..n).map(|i| i as f64 * 0.1).collect(), poses).unwrap()
}

#[test]
fn synth_gen_default_writes_a_triplet() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth(tmp.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let names = files(tmp.path());
    for f in ["frame_000.ppm", "frame_001.ppm", "frame_002.ppm", "depth_002.pfm", "poses.txt", "intrinsics.txt", "scene.txt"] {
        assert!(names.contains(&f.to_string()), "{f} missing from {names:?}");
    }
    assert!(!names.contains(&"frame_003.ppm".to_string()));
    let poses = io::read_trajectory(&tmp.path().join("poses.txt"), None).unwrap();
    assert_eq!(poses.len(), 3);
}

#[test]
fn synth_gen_repeats_bytes_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let snapshot = |seed: &str| {
        assert!(synth(tmp.path(), &["--seed", seed]).status.success());
        files(tmp.path()).into_iter().map(|n| (fs::read(tmp.path().join(&n)).unwrap(), n)).collect::<Vec<_>>()
    };
    let first = snapshot("3");
    assert_eq!(first, snapshot("3"));
    let other = snapshot("4");
    let frame = |s: &[(Vec<u8>, String)]| s.iter().find(|(_, n)| n == "frame_000.ppm").unwrap().0.clone();
    assert_ne!(frame(&first), frame(&other));
}

#[test]
fn synth_gen_corridor_has_seven_frames() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(synth(tmp.path(), &["--scene", "corridor"]).status.success());
    let frames = files(tmp.path()).into_iter().filter(|n| n.starts_with("frame_")).count();
    assert_eq!(frames, 7);
}

#[test]
fn optimize_without_intrinsics_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert!(synth(&scene, &[]).status.success());
    fs::remove_file(scene.join("intrinsics.txt")).unwrap();
    let out = depthvo(&["optimize", "--input", path(&scene), "--out-dir", path(&tmp.path().join("out"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("intrinsics"));
}

#[test]
fn optimize_budget_one_exhausts() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let res = tmp.path().join("out");
    assert!(synth(&scene, &[]).status.success());
    let out = depthvo(&["optimize", "--input", path(&scene), "--out-dir", path(&res), "--budget", "1", "--levels", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = read_csv(&res.join("trace.csv"));
    assert_eq!(trace.len(), 1);
    for f in ["depth_000.pfm", "depth_001.pfm", "depth_002.pfm", "trajectory.txt", "diagnostics.txt"] {
        assert!(res.join(f).is_file(), "{f}");
    }
    let traj = io::read_trajectory(&res.join("trajectory.txt"), None).unwrap();
    assert_eq!(traj.len(), 3);
}

#[test]
fn config_file_and_flags_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let res = tmp.path().join("out");
    assert!(synth(&scene, &[]).status.success());
    let cfg = tmp.path().join("run.txt");
    fs::write(&cfg, "# budget comes from the flag\nopt.budget = 50\nopt.levels = 1\nloss.ssim = 0\n").unwrap();
    let out = depthvo(&[
        "--config",
        path(&cfg),
        "optimize",
        "--input",
        path(&scene),
        "--out-dir",
        path(&res),
        "--budget",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_csv(&res.join("trace.csv")).len(), 3);
    let used = fs::read_to_string(res.join("config.txt")).unwrap();
    assert!(used.contains("opt.budget = 3"));
    assert!(used.contains("loss.ssim = 0"));

    fs::write(&cfg, "opt.budgett = 50\n").unwrap();
    let out = depthvo(&["--config", path(&cfg), "optimize", "--input", path(&scene), "--out-dir", path(&res)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn grad_check_passes_and_reports_every_term() {
    let tmp = tempfile::tempdir().unwrap();
    let out = depthvo(&["grad-check", "--configurations", "5", "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = read_csv(&tmp.path().join("gradcheck.csv"));
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    for name in ["photometric", "ssim", "smoothness", "scale_consistency", "cycle", "residual_reg", "warp", "attention_de"] {
        assert!(names.contains(&name), "{name} missing");
    }
    let modules: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    for m in ["losses", "geometry", "attention_de"] {
        assert!(modules.contains(&m));
    }
    assert!(rows.iter().all(|r| r[6] == "true"));
}

#[test]
fn grad_check_catches_a_corrupted_gradient() {
    let tmp = tempfile::tempdir().unwrap();
    let out = depthvo(&["grad-check", "--configurations", "3", "--corrupt", "ssim", "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(4));
    let rows = read_csv(&tmp.path().join("gradcheck.csv"));
    let ssim = rows.iter().find(|r| r[0] == "ssim").unwrap();
    assert_eq!(ssim[6], "false");
}

fn write_traj(dir: &Path, name: &str, t: &Trajectory) -> PathBuf {
    let p = dir.join(name);
    io::write_trajectory(&p, t, TrajectoryFormat::Tum).unwrap();
    p
}

#[test]
fn eval_traj_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = write_traj(tmp.path(), "gt.txt", &helix(400));
    let out = depthvo(&["eval-traj", path(&gt), path(&gt), "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&tmp.path().join("traj_metrics.csv"));
    assert!(rows.len() >= 2);
    assert_eq!(rows.last().unwrap()[0], "mean");
    for r in &rows {
        assert!(r[1].parse::<f64>().unwrap().abs() < 1e-9, "{r:?}");
        assert!(r[2].parse::<f64>().unwrap().abs() < 1e-9, "{r:?}");
    }
    let ate = read_csv(&tmp.path().join("ate.csv"));
    assert!(ate[0][0].parse::<f64>().unwrap() < 1e-9);
}

#[test]
fn eval_traj_scaled_line_gives_one_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = write_traj(tmp.path(), "gt.txt", &straight_line(500, 0.1));
    let est = write_traj(tmp.path(), "est.txt", &straight_line(500, 0.101));
    let out = depthvo(&["eval-traj", path(&est), path(&gt), "--align", "false", "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&tmp.path().join("traj_metrics.csv"));
    for r in &rows {
        approx::assert_abs_diff_eq!(r[1].parse::<f64>().unwrap(), 1.0, epsilon = 1e-6);
    }
    let ate = read_csv(&tmp.path().join("ate.csv"));
    assert_eq!(ate[0][3], "identity");

    // A line leaves the similarity fit without a unique rotation.
    let out = depthvo(&["eval-traj", path(&est), path(&gt), "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("collinear"));
}

#[test]
fn eval_traj_alignment_absorbs_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let gt_traj = helix(300);
    let scaled = Trajectory::new(
        gt_traj.stamps().to_vec(),
        gt_traj.poses().iter().map(|p| PoseSE3::new(*p.rotation(), p.translation() * 1.01).unwrap()).collect(),
    )
    .unwrap();
    let gt = write_traj(tmp.path(), "gt.txt", &gt_traj);
    let est = write_traj(tmp.path(), "est.txt", &scaled);
    let out = depthvo(&["eval-traj", path(&est), path(&gt), "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&tmp.path().join("traj_metrics.csv"));
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() < 1e-4), "{rows:?}");
    let ate = read_csv(&tmp.path().join("ate.csv"));
    approx::assert_relative_eq!(ate[0][1].parse::<f64>().unwrap(), 1.0 / 1.01, epsilon = 1e-6);
    assert_eq!(ate[0][3], "sim3");
}

#[test]
fn eval_traj_names_the_bad_line() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = write_traj(tmp.path(), "gt.txt", &straight_line(50, 0.1));
    let mut text = fs::read_to_string(&gt).unwrap();
    text = text.replacen('\n', "\n0.1 0 0 oops 0 0 0 1\n", 2);
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, text).unwrap();
    let out = depthvo(&["eval-traj", path(&bad), path(&gt), "--format", "tum", "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.txt") && err.contains("line 2"), "{err}");
}

#[test]
fn eval_depth_identical_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert!(synth(&scene, &[]).status.success());
    let out = depthvo(&["eval-depth", path(&scene), path(&scene), "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&tmp.path().join("depth_metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.last().unwrap()[0], "mean");
    for r in &rows {
        let v: Vec<f64> = r[1..].iter().map(|s| s.parse().unwrap()).collect();
        assert_eq!(v, [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], "{r:?}");
    }
}

#[test]
fn eval_depth_rejects_a_corrupt_map() {
    let tmp = tempfile::tempdir().unwrap();
    let (gt, pred) = (tmp.path().join("gt"), tmp.path().join("pred"));
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    io::write_pfm(&gt.join("depth_000.pfm"), &ImageGrid::filled(4, 4, 1, 2.0)).unwrap();
    fs::write(pred.join("depth_000.pfm"), b"Pf\n4 x\n-1.0\n").unwrap();
    let out = depthvo(&["eval-depth", path(&pred), path(&gt), "--out-dir", path(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("depth_000.pfm") && err.contains("line 2"), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(depthvo(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(depthvo(&["--help"]).status.code(), Some(0));
}
