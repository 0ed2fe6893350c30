//! The `depthvo` command line.
//!
//! Exit codes: 0 success (or convergence), 1 malformed input or any other
//! error, 2 iteration budget exhausted, 3 divergence, 4 a gradient check
//! failed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use crate::config::RunConfig;
use crate::error::Error;
use crate::eval::{associate, ate_rmse, depth_metrics, segment_rpe, umeyama_align, DepthMetrics, Sim3};
use crate::gradcheck::{run_all, CheckOptions, TOLERANCE};
use crate::io;
use crate::kv::{fmt_f64, fmt_floats, KvDoc};
use crate::optimizer::{chain_sequence, optimize_sequence, sequence_triplets, Status, TripletSolution};
use crate::synth::{moving_mask, render_scene, SceneSpec, Texture};
use crate::types::{ImageGrid, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BUDGET: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

/// Thread-count override for the internal pool.
pub const THREADS_ENV: &str = "DEPTHVO_THREADS";

#[derive(Debug, Parser)]
#[command(name = "depthvo", version, about = "Self-supervised monocular depth and motion on synthetic scenes")]
pub struct Cli {
    /// Random seed (key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (key `out_dir`).
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    /// Override any config key; repeatable.  Dedicated flags win over these.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene: frames, depth, poses and the scene file.
    SynthGen {
        /// slanted, moving or corridor.
        #[arg(long)]
        scene: Option<String>,
        /// SceneSpec text file to render instead of a preset.
        #[arg(long)]
        scene_file: Option<String>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Jointly optimize depth and motion over every triplet of a sequence.
    Optimize {
        /// Directory holding frame_NNN.ppm files.
        #[arg(long)]
        input: Option<String>,
        /// Intrinsics file, `fx fy cx cy`; defaults to INPUT/intrinsics.txt.
        #[arg(long)]
        intrinsics: Option<String>,
        /// Iterations per triplet, summed over pyramid levels.
        #[arg(long)]
        budget: Option<usize>,
        /// Pyramid levels.
        #[arg(long)]
        levels: Option<usize>,
        /// rigid_first or moving_objects.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Compare every analytic gradient with central finite differences.
    GradCheck {
        /// Random configurations per check.
        #[arg(long)]
        configurations: Option<usize>,
        /// Corrupt one analytic gradient (to see the check fail).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Trajectory metrics: ATE after Sim(3) alignment and segment errors.
    EvalTraj {
        /// Estimated trajectory file.
        est: Option<String>,
        /// Ground-truth trajectory file.
        gt: Option<String>,
        /// tum, kitti or auto.
        #[arg(long)]
        format: Option<String>,
        /// Segment lengths in meters.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        lengths: Option<Vec<f64>>,
        /// Score segments on the Sim(3)-aligned estimate.
        #[arg(long)]
        align: Option<bool>,
    },
    /// Depth metrics over matching depth_NNN.pfm files of two directories.
    EvalDepth {
        /// Directory of predicted depth maps.
        pred_dir: Option<String>,
        /// Directory of ground-truth depth maps.
        gt_dir: Option<String>,
        /// Rescale each prediction by the ratio of medians first.
        #[arg(long)]
        median_scale: Option<bool>,
    },
}

impl Cli {
    /// Config-key overrides in increasing precedence.
    fn overrides(&self) -> anyhow::Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        put("seed", self.seed.map(|s| s.to_string()));
        put("out_dir", self.out_dir.clone());
        match &self.command {
            Command::SynthGen {
                scene,
                scene_file,
                width,
                height,
            } => {
                put("scene", scene.clone());
                put("scene_file", scene_file.clone());
                put("width", width.map(|v| v.to_string()));
                put("height", height.map(|v| v.to_string()));
            }
            Command::Optimize {
                input,
                intrinsics,
                budget,
                levels,
                schedule,
            } => {
                put("input", input.clone());
                put("intrinsics", intrinsics.clone());
                put("opt.budget", budget.map(|v| v.to_string()));
                put("opt.levels", levels.map(|v| v.to_string()));
                put("opt.schedule", schedule.clone());
            }
            Command::GradCheck { configurations, corrupt } => {
                put("check.configurations", configurations.map(|v| v.to_string()));
                put("check.corrupt", corrupt.clone());
            }
            Command::EvalTraj {
                est,
                gt,
                format,
                lengths,
                align,
            } => {
                put("eval.est", est.clone());
                put("eval.gt", gt.clone());
                put("eval.format", format.clone());
                put("eval.lengths", lengths.as_ref().map(|l| fmt_floats(l)));
                put("eval.align", align.map(|v| v.to_string()));
            }
            Command::EvalDepth {
                pred_dir,
                gt_dir,
                median_scale,
            } => {
                put("eval.pred_dir", pred_dir.clone());
                put("eval.gt_dir", gt_dir.clone());
                put("eval.median_scale", median_scale.map(|v| v.to_string()));
            }
        }
        Ok(out)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    // A pool may already exist when running inside tests; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> anyhow::Result<i32> {
    configure_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides()?).with_context(|| match &cli.config {
        Some(p) => format!("config {}", p.display()),
        None => "configuration".to_string(),
    })?;
    let out = Path::new(&cfg.out_dir);
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    match &cli.command {
        Command::SynthGen { .. } => synth_gen(&cfg, out),
        Command::Optimize { .. } => optimize(&cfg, out),
        Command::GradCheck { .. } => grad_check(&cfg, out),
        Command::EvalTraj { .. } => eval_traj(&cfg, out),
        Command::EvalDepth { .. } => eval_depth(&cfg, out),
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    io::write_atomic(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

/// Nonzero seeds re-draw every noise texture.
fn reseed(spec: &mut SceneSpec, seed: u64) {
    if seed == 0 {
        return;
    }
    for p in &mut spec.planes {
        if let Texture::ValueNoise { seed: s, .. } = &mut p.texture {
            *s = s.wrapping_add(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
    }
}

fn frame_name(prefix: &str, i: usize, ext: &str) -> String {
    format!("{prefix}_{i:03}.{ext}")
}

fn synth_gen(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    let mut spec = match &cfg.scene_file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {p}"))?;
            SceneSpec::from_text(&text).with_context(|| format!("scene file {p}"))?
        }
        None => cfg.scene.spec(cfg.width, cfg.height),
    };
    reseed(&mut spec, cfg.seed);
    spec.validate()?;
    info!("rendering {} frames at {}×{}", spec.frame_count(), spec.width, spec.height);
    for f in 0..spec.frame_count() {
        let r = render_scene(&spec, f)?;
        write(&out.join(frame_name("frame", f, "ppm")), &io::ppm_bytes(&r.image)?)?;
        write(&out.join(frame_name("depth", f, "pfm")), &io::pfm_bytes(&r.depth)?)?;
        if spec.planes.iter().any(|p| p.is_moving()) {
            write(&out.join(frame_name("moving", f, "pgm")), &io::pgm_bytes(&moving_mask(&spec, f)?)?)?;
        }
    }
    let traj = Trajectory::new(spec.timestamps(), spec.poses.clone())?;
    write(&out.join("poses.txt"), io::trajectory_text(&traj, cfg.trajectory_format).as_bytes())?;
    write(&out.join("times.txt"), times_text(traj.stamps()).as_bytes())?;
    write(&out.join("intrinsics.txt"), io::intrinsics_text(&spec.intrinsics).as_bytes())?;
    write(&out.join("scene.txt"), spec.to_text().as_bytes())?;
    write(&out.join("config.txt"), cfg.serialize().as_bytes())?;
    Ok(EXIT_OK)
}

fn times_text(stamps: &[f64]) -> String {
    stamps.iter().map(|t| fmt_f64(*t) + "\n").collect()
}

/// `prefix_NNN.ext` files of `dir`, sorted by number.
fn numbered_files(dir: &Path, prefix: &str, ext: &str) -> anyhow::Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(num) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('_'))
            .and_then(|r| r.strip_suffix(ext))
            .and_then(|r| r.strip_suffix('.'))
        else {
            continue;
        };
        if let Ok(n) = num.parse::<usize>() {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

fn read_times(path: &Path, n: usize) -> anyhow::Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(
            line.parse::<f64>()
                .map_err(|_| anyhow!("{}: line {}: not a number: `{line}`", path.display(), i + 1))?,
        );
    }
    if out.len() != n {
        bail!("{}: {} timestamps for {n} frames", path.display(), out.len());
    }
    Ok(out)
}

/// Each frame's depth from the triplet where it is the target; the ends come
/// from the first and last triplet.
fn sequence_depths(solutions: &[TripletSolution]) -> Vec<ImageGrid> {
    let n = solutions.len();
    let mut out = vec![solutions[0].params.depth(0)];
    out.extend(solutions.iter().map(|s| s.params.depth(1)));
    out.push(solutions[n - 1].params.depth(2));
    out
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Converged => "converged",
        Status::BudgetExhausted => "budget_exhausted",
        Status::Diverged => "diverged",
    }
}

fn optimize(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    let input = cfg.require_path(&cfg.input, "input")?;
    let k_path = match &cfg.intrinsics {
        Some(p) => PathBuf::from(p),
        None => input.join("intrinsics.txt"),
    };
    if !k_path.is_file() {
        bail!("missing intrinsics file {}", k_path.display());
    }
    let k = io::read_intrinsics(&k_path).with_context(|| format!("intrinsics {}", k_path.display()))?;
    let files = numbered_files(input, "frame", "ppm")?;
    if files.len() < 3 {
        bail!("{}: need at least 3 frame_NNN.ppm files, found {}", input.display(), files.len());
    }
    let mut frames = Vec::with_capacity(files.len());
    for (_, p) in &files {
        frames.push(io::read_pnm(p).with_context(|| format!("frame {}", p.display()))?);
    }
    let times_path = input.join("times.txt");
    let stamps = if times_path.is_file() {
        read_times(&times_path, frames.len())?
    } else {
        (0..frames.len()).map(|i| i as f64).collect()
    };
    let triplets = sequence_triplets(&frames, &k)?;
    info!("optimizing {} triplets", triplets.len());
    let solutions = optimize_sequence(&triplets, &cfg.loss, &cfg.optimizer)?;
    let chain = chain_sequence(&solutions)?;

    for ((n, _), d) in files.iter().zip(sequence_depths(&solutions)) {
        write(&out.join(frame_name("depth", *n, "pfm")), &io::pfm_bytes(&d)?)?;
    }
    for (t, s) in solutions.iter().enumerate() {
        // Gates of the target frame towards the previous and next frames.
        write(&out.join(format!("gate_{t:03}_prev.pgm")), &io::pgm_bytes(&s.gate(0))?)?;
        write(&out.join(format!("gate_{t:03}_next.pgm")), &io::pgm_bytes(&s.gate(2))?)?;
    }
    let traj = Trajectory::new(stamps, chain.trajectory.poses().to_vec())?;
    write(&out.join("trajectory.txt"), io::trajectory_text(&traj, cfg.trajectory_format).as_bytes())?;

    let header = [
        "triplet",
        "iteration",
        "level",
        "total",
        "photometric",
        "ssim",
        "smoothness",
        "scale_consistency",
        "cycle",
        "residual_reg",
    ];
    let mut rows = Vec::new();
    for (t, s) in solutions.iter().enumerate() {
        for r in &s.trace {
            let mut row = vec![t.to_string(), r.iteration.to_string(), r.level.to_string(), fmt_f64(r.breakdown.total)];
            row.extend(r.breakdown.terms().iter().map(|v| fmt_f64(*v)));
            rows.push(row);
        }
    }
    write(&out.join("trace.csv"), &io::csv_bytes(&header, &rows)?)?;

    let mut diag = KvDoc::new();
    diag.set("triplets", solutions.len());
    for (t, s) in solutions.iter().enumerate() {
        diag.set(&format!("triplet_{t:03}.status"), status_name(s.status));
        diag.set(&format!("triplet_{t:03}.iterations"), s.iterations);
        diag.set(&format!("triplet_{t:03}.initial_loss"), fmt_f64(s.initial.total));
        diag.set(&format!("triplet_{t:03}.final_loss"), fmt_f64(s.final_loss.total));
        if let Some(m) = &s.diagnostic {
            diag.set(&format!("triplet_{t:03}.diagnostic"), m.replace('\n', " "));
        }
    }
    diag.set("scale_ratios", fmt_floats(&chain.scale_ratios));
    diag.set("max_ratio_deviation", fmt_f64(chain.max_ratio_deviation()));
    write(&out.join("diagnostics.txt"), diag.serialize().as_bytes())?;
    write(&out.join("config.txt"), cfg.serialize().as_bytes())?;

    let statuses: Vec<Status> = solutions.iter().map(|s| s.status).collect();
    Ok(if statuses.contains(&Status::Diverged) {
        EXIT_DIVERGED
    } else if statuses.contains(&Status::BudgetExhausted) {
        EXIT_BUDGET
    } else {
        EXIT_OK
    })
}

fn grad_check(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    let opts = CheckOptions {
        seed: cfg.seed,
        configurations: cfg.check_configurations,
        corrupt: cfg.check_corrupt.clone(),
    };
    let reports = run_all(&opts)?;
    let header = ["check", "module", "configurations", "coordinates", "skipped", "max_rel_err", "passed"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.name.to_string(),
                r.module.to_string(),
                r.configurations.to_string(),
                r.coordinates.to_string(),
                r.skipped.to_string(),
                format!("{:.3e}", r.max_rel_err),
                r.passed().to_string(),
            ]
        })
        .collect();
    println!("{:<18} {:<13} {:>7} {:>12}  result", "check", "module", "configs", "max rel err");
    for r in &reports {
        println!(
            "{:<18} {:<13} {:>7} {:>12.3e}  {}",
            r.name,
            r.module,
            r.configurations,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    write(&out.join("gradcheck.csv"), &io::csv_bytes(&header, &rows)?)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        eprintln!("{failed} check(s) exceed relative error {TOLERANCE:e}");
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

/// Column header of the trajectory table.
pub const TRAJ_COLUMNS: [&str; 4] = ["length_m", "t_err_pct", "r_err_deg_per_100m", "segments"];

fn eval_traj(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    let est_path = cfg.require_path(&cfg.est, "eval.est")?;
    let gt_path = cfg.require_path(&cfg.gt, "eval.gt")?;
    let est = io::read_trajectory(est_path, cfg.format).with_context(|| format!("{}", est_path.display()))?;
    let gt = io::read_trajectory(gt_path, cfg.format).with_context(|| format!("{}", gt_path.display()))?;
    let (est, gt) = associate(&est, &gt, cfg.max_gap)?;
    let (sim, alignment) = match umeyama_align(&est, &gt) {
        Ok(sim) => (sim, "sim3"),
        // Segment errors do not need the fit; ATE falls back to the raw poses.
        Err(Error::Degenerate(why)) if !cfg.align => {
            eprintln!("note: no similarity fit ({why}); ATE uses the identity");
            (Sim3::identity(), "identity")
        }
        Err(Error::Degenerate(why)) => bail!("cannot align trajectories: {why}; pass --align false to score them as is"),
        Err(e) => return Err(e.into()),
    };
    let ate = ate_rmse(&est, &gt, &sim)?;
    let scored = if cfg.align { sim.apply_trajectory(&est)? } else { est };
    let report = segment_rpe(&scored, &gt, &cfg.lengths)?;
    if let Some(d) = &report.diagnostic {
        eprintln!("note: {d}");
    }
    let mut rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| vec![fmt_f64(r.length), fmt_f64(r.t_err), fmt_f64(r.r_err), r.segments.to_string()])
        .collect();
    let total: usize = report.rows.iter().map(|r| r.segments).sum();
    if !report.is_empty() {
        rows.push(vec!["mean".into(), fmt_f64(report.t_err), fmt_f64(report.r_err), total.to_string()]);
    }
    write(&out.join("traj_metrics.csv"), &io::csv_bytes(&TRAJ_COLUMNS, &rows)?)?;
    let ate_row = vec![vec![fmt_f64(ate), fmt_f64(sim.scale()), gt.len().to_string(), alignment.to_string()]];
    write(&out.join("ate.csv"), &io::csv_bytes(&["ate_rmse_m", "scale", "poses", "alignment"], &ate_row)?)?;
    println!("ATE {ate:.6} m over {} poses (scale {:.6})", gt.len(), sim.scale());
    for r in &report.rows {
        println!("{:>6} m: t_err {:.4} %  r_err {:.4} deg/100m  ({} segments)", r.length, r.t_err, r.r_err, r.segments);
    }
    Ok(EXIT_OK)
}

/// Column header of the depth table.
pub const DEPTH_COLUMNS: [&str; 8] = ["image", "abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3"];

fn eval_depth(cfg: &RunConfig, out: &Path) -> anyhow::Result<i32> {
    let pred_dir = cfg.require_path(&cfg.pred_dir, "eval.pred_dir")?;
    let gt_dir = cfg.require_path(&cfg.gt_dir, "eval.gt_dir")?;
    let gts = numbered_files(gt_dir, "depth", "pfm")?;
    if gts.is_empty() {
        bail!("{}: no depth_NNN.pfm files", gt_dir.display());
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (n, gt_path) in &gts {
        let name = frame_name("depth", *n, "pfm");
        let pred_path = pred_dir.join(&name);
        if !pred_path.is_file() {
            bail!("missing prediction {}", pred_path.display());
        }
        let gt = io::read_pfm(gt_path).with_context(|| format!("{}", gt_path.display()))?;
        let pred = io::read_pfm(&pred_path).with_context(|| format!("{}", pred_path.display()))?;
        let m = depth_metrics(&pred, &gt, None, cfg.median_scale).with_context(|| name.clone())?;
        let mut row = vec![name];
        row.extend(m.as_array().iter().map(|v| fmt_f64(*v)));
        rows.push(row);
        all.push(m);
    }
    let mean = DepthMetrics::mean(&all)?;
    let mut row = vec!["mean".to_string()];
    row.extend(mean.as_array().iter().map(|v| fmt_f64(*v)));
    rows.push(row);
    write(&out.join("depth_metrics.csv"), &io::csv_bytes(&DEPTH_COLUMNS, &rows)?)?;
    let a = mean.as_array();
    println!(
        "{} images: AbsRel {:.4}  SqRel {:.4}  RMS {:.4}  RMSlog {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}",
        all.len(),
        a[0],
        a[1],
        a[2],
        a[3],
        a[4],
        a[5],
        a[6]
    );
    Ok(EXIT_OK)
}
