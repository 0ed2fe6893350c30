//! Run configuration shared by every command.
//!
//! A config file is flat `key = value` text (see [`crate::kv`]).  Values are
//! resolved in this order, later winning:
//!
//! 1. built-in defaults,
//! 2. the preset selected by `opt.schedule`,
//! 3. keys in the config file,
//! 4. command-line flags.
//!
//! Unknown keys are rejected with the offending line.  [`RunConfig::serialize`]
//! writes every key explicitly, so a serialized config reproduces the run
//! without relying on defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{MAX_ASSOCIATION_GAP, SEGMENT_LENGTHS};
use crate::io::TrajectoryFormat;
use crate::kv::{fmt_f64, fmt_floats, KvDoc};
use crate::losses::LossOptions;
use crate::optimizer::OptimizerConfig;
use crate::synth::{presets, SceneSpec};

/// Default image size of a run.
pub const DEFAULT_WIDTH: usize = 416;
pub const DEFAULT_HEIGHT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePreset {
    /// Static textured room, 3 frames.
    Slanted,
    /// The room with one independently moving panel, 3 frames.
    Moving,
    /// Forward motion down a corridor, 7 frames.
    Corridor,
}

impl ScenePreset {
    pub fn spec(&self, width: usize, height: usize) -> SceneSpec {
        match self {
            Self::Slanted => presets::slanted_planes(width, height),
            Self::Moving => presets::moving_plane(width, height),
            Self::Corridor => presets::corridor(width, height),
        }
    }
}

impl FromStr for ScenePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slanted" => Ok(Self::Slanted),
            "moving" => Ok(Self::Moving),
            "corridor" => Ok(Self::Corridor),
            _ => Err(Error::InvalidArgument(format!("unknown scene `{s}` (slanted, moving or corridor)"))),
        }
    }
}

impl fmt::Display for ScenePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Slanted => "slanted",
            Self::Moving => "moving",
            Self::Corridor => "corridor",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// [`OptimizerConfig::default`]: rigid motion first, residual later.
    RigidFirst,
    /// [`OptimizerConfig::moving_objects`].
    MovingObjects,
}

impl Schedule {
    pub fn base(&self) -> OptimizerConfig {
        match self {
            Self::RigidFirst => OptimizerConfig::default(),
            Self::MovingObjects => OptimizerConfig::moving_objects(),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigid_first" => Ok(Self::RigidFirst),
            "moving_objects" => Ok(Self::MovingObjects),
            _ => Err(Error::InvalidArgument(format!(
                "unknown schedule `{s}` (rigid_first or moving_objects)"
            ))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RigidFirst => "rigid_first",
            Self::MovingObjects => "moving_objects",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub scene: ScenePreset,
    /// SceneSpec text file; replaces the preset and its size when set.
    pub scene_file: Option<String>,
    pub width: usize,
    pub height: usize,
    /// Directory of `frame_NNN.ppm` files for `optimize`.
    pub input: Option<String>,
    /// Defaults to `intrinsics.txt` inside `input`.
    pub intrinsics: Option<String>,
    /// Format of written trajectories.
    pub trajectory_format: TrajectoryFormat,
    pub loss: LossOptions,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub est: Option<String>,
    pub gt: Option<String>,
    pub pred_dir: Option<String>,
    pub gt_dir: Option<String>,
    /// Trajectory input format; `None` detects it per file.
    pub format: Option<TrajectoryFormat>,
    pub lengths: Vec<f64>,
    pub median_scale: bool,
    /// Apply the fitted Sim(3) to the estimate before scoring segments.
    pub align: bool,
    pub max_gap: f64,
    pub check_configurations: usize,
    /// Test hook for `grad-check`: corrupts the named gradient.
    pub check_corrupt: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "out".into(),
            scene: ScenePreset::Slanted,
            scene_file: None,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            input: None,
            intrinsics: None,
            trajectory_format: TrajectoryFormat::Tum,
            loss: LossOptions::default(),
            schedule: Schedule::RigidFirst,
            optimizer: OptimizerConfig::default(),
            est: None,
            gt: None,
            pred_dir: None,
            gt_dir: None,
            format: None,
            lengths: SEGMENT_LENGTHS.to_vec(),
            median_scale: true,
            align: true,
            max_gap: MAX_ASSOCIATION_GAP,
            check_configurations: 100,
            check_corrupt: None,
        }
    }
}

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "scene",
    "scene_file",
    "width",
    "height",
    "input",
    "intrinsics",
    "trajectory_format",
    "loss.photometric",
    "loss.ssim",
    "loss.smoothness",
    "loss.scale_consistency",
    "loss.cycle",
    "loss.residual_reg",
    "loss.occlusion",
    "loss.d_n",
    "loss.tau_z",
    "loss.cycle_rotation_weight",
    "loss.residual_lambda",
    "loss.gate_weight",
    "loss.residual_magnitude",
    "loss.motion_smoothness",
    "opt.schedule",
    "opt.levels",
    "opt.budget",
    "opt.tolerance",
    "opt.window",
    "opt.scene_scale",
    "opt.gate_logit",
    "opt.coarse_smoothness",
    "opt.coarse_tau",
    "opt.occlusion_warmup",
    "opt.early_exit",
    "opt.lr_floor",
    "opt.residual_level",
    "opt.rigid_warmup",
    "adam.lr",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "rate.depth",
    "rate.rotation",
    "rate.translation",
    "rate.residual",
    "rate.gate",
    "eval.est",
    "eval.gt",
    "eval.pred_dir",
    "eval.gt_dir",
    "eval.format",
    "eval.lengths",
    "eval.median_scale",
    "eval.align",
    "eval.max_gap",
    "check.configurations",
    "check.corrupt",
];

/// `opt.residual_level` accepts a level index or `all`.
struct ResidualLevel(usize);

impl FromStr for ResidualLevel {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        if s == "all" {
            Ok(Self(usize::MAX))
        } else {
            s.parse().map(Self).map_err(|_| ())
        }
    }
}

/// `eval.format` accepts `auto` besides the formats themselves.
struct FormatChoice(Option<TrajectoryFormat>);

impl FromStr for FormatChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            Ok(Self(None))
        } else {
            s.parse().map(|f| Self(Some(f)))
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_doc(&KvDoc::parse(text)?)
    }

    /// Reads `file` if given, applies `overrides` on top and validates.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = match file {
            Some(p) => KvDoc::parse(&std::fs::read_to_string(p)?)?,
            None => KvDoc::new(),
        };
        for (k, v) in overrides {
            doc.set(k, v);
        }
        Self::from_doc(&doc)
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        doc.reject_unknown(|k| KEYS.contains(&k))?;
        let d = Self::default();
        let schedule: Schedule = doc.get_or("opt.schedule", d.schedule)?;
        let o = schedule.base();
        let lw = d.loss.weights;
        let l = d.loss;
        let opt_str = |key: &str| doc.raw(key).map(str::to_string);
        let mut cfg = Self {
            seed: doc.get_or("seed", d.seed)?,
            out_dir: doc.get_or("out_dir", d.out_dir)?,
            scene: doc.get_or("scene", d.scene)?,
            scene_file: opt_str("scene_file"),
            width: doc.get_or("width", d.width)?,
            height: doc.get_or("height", d.height)?,
            input: opt_str("input"),
            intrinsics: opt_str("intrinsics"),
            trajectory_format: doc.get_or("trajectory_format", d.trajectory_format)?,
            loss: LossOptions {
                weights: crate::losses::LossWeights {
                    photometric: doc.get_or("loss.photometric", lw.photometric)?,
                    ssim: doc.get_or("loss.ssim", lw.ssim)?,
                    smoothness: doc.get_or("loss.smoothness", lw.smoothness)?,
                    scale_consistency: doc.get_or("loss.scale_consistency", lw.scale_consistency)?,
                    cycle: doc.get_or("loss.cycle", lw.cycle)?,
                    residual_reg: doc.get_or("loss.residual_reg", lw.residual_reg)?,
                },
                occlusion: doc.get_or("loss.occlusion", l.occlusion)?,
                d_n: doc.get_or("loss.d_n", l.d_n)?,
                tau_z: doc.get_or("loss.tau_z", l.tau_z)?,
                cycle_rotation_weight: doc.get_or("loss.cycle_rotation_weight", l.cycle_rotation_weight)?,
                residual_lambda: doc.get_or("loss.residual_lambda", l.residual_lambda)?,
                gate_weight: doc.get_or("loss.gate_weight", l.gate_weight)?,
                residual_magnitude: doc.get_or("loss.residual_magnitude", l.residual_magnitude)?,
                motion_smoothness: doc.get_or("loss.motion_smoothness", l.motion_smoothness)?,
                smoothness_scale: l.smoothness_scale,
            },
            schedule,
            optimizer: OptimizerConfig {
                levels: doc.get_or("opt.levels", o.levels)?,
                budget: doc.get_or("opt.budget", o.budget)?,
                tolerance: doc.get_or("opt.tolerance", o.tolerance)?,
                window: doc.get_or("opt.window", o.window)?,
                adam: crate::optimizer::AdamHyper {
                    lr: doc.get_or("adam.lr", o.adam.lr)?,
                    beta1: doc.get_or("adam.beta1", o.adam.beta1)?,
                    beta2: doc.get_or("adam.beta2", o.adam.beta2)?,
                    eps: doc.get_or("adam.eps", o.adam.eps)?,
                },
                rates: crate::optimizer::GroupRates {
                    depth: doc.get_or("rate.depth", o.rates.depth)?,
                    rotation: doc.get_or("rate.rotation", o.rates.rotation)?,
                    translation: doc.get_or("rate.translation", o.rates.translation)?,
                    residual: doc.get_or("rate.residual", o.rates.residual)?,
                    gate: doc.get_or("rate.gate", o.rates.gate)?,
                },
                scene_scale: doc.get_or("opt.scene_scale", o.scene_scale)?,
                gate_logit: doc.get_or("opt.gate_logit", o.gate_logit)?,
                coarse_smoothness: doc.get_or("opt.coarse_smoothness", o.coarse_smoothness)?,
                coarse_tau: doc.get_or("opt.coarse_tau", o.coarse_tau)?,
                occlusion_warmup: doc.get_or("opt.occlusion_warmup", o.occlusion_warmup)?,
                early_exit: doc.get_or("opt.early_exit", o.early_exit)?,
                lr_floor: doc.get_or("opt.lr_floor", o.lr_floor)?,
                residual_level: doc.get_or("opt.residual_level", ResidualLevel(o.residual_level))?.0,
                rigid_warmup: doc.get_or("opt.rigid_warmup", o.rigid_warmup)?,
            },
            est: opt_str("eval.est"),
            gt: opt_str("eval.gt"),
            pred_dir: opt_str("eval.pred_dir"),
            gt_dir: opt_str("eval.gt_dir"),
            format: doc.get_or("eval.format", FormatChoice(d.format))?.0,
            lengths: doc.float_list("eval.lengths")?.unwrap_or(d.lengths),
            median_scale: doc.get_or("eval.median_scale", d.median_scale)?,
            align: doc.get_or("eval.align", d.align)?,
            max_gap: doc.get_or("eval.max_gap", d.max_gap)?,
            check_configurations: doc.get_or("check.configurations", d.check_configurations)?,
            check_corrupt: opt_str("check.corrupt"),
        };
        // Empty values on optional paths mean "unset".
        for p in [
            &mut cfg.scene_file,
            &mut cfg.input,
            &mut cfg.intrinsics,
            &mut cfg.est,
            &mut cfg.gt,
            &mut cfg.pred_dir,
            &mut cfg.gt_dir,
            &mut cfg.check_corrupt,
        ] {
            if p.as_deref() == Some("") {
                *p = None;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dir.is_empty() {
            return Err(Error::InvalidArgument("out_dir must not be empty".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument(format!(
                "image size must be at least 2×2, got {}×{}",
                self.width, self.height
            )));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("segment lengths must be positive".into()));
        }
        if !(self.max_gap >= 0.0) {
            return Err(Error::InvalidArgument("eval.max_gap must be ≥ 0".into()));
        }
        if self.check_configurations == 0 {
            return Err(Error::InvalidArgument("check.configurations must be > 0".into()));
        }
        Ok(())
    }

    /// Value of a path that the current command cannot run without.
    pub fn require_path<'a>(&self, value: &'a Option<String>, key: &str) -> Result<&'a Path> {
        match value.as_deref() {
            Some(p) if !p.is_empty() => Ok(Path::new(p)),
            _ => Err(Error::InvalidArgument(format!("missing required path `{key}`"))),
        }
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let f = |v: f64| fmt_f64(v);
        doc.set("seed", self.seed);
        doc.set("out_dir", &self.out_dir);
        doc.set("scene", self.scene);
        doc.set("width", self.width);
        doc.set("height", self.height);
        for (key, v) in [
            ("scene_file", &self.scene_file),
            ("input", &self.input),
            ("intrinsics", &self.intrinsics),
            ("eval.est", &self.est),
            ("eval.gt", &self.gt),
            ("eval.pred_dir", &self.pred_dir),
            ("eval.gt_dir", &self.gt_dir),
            ("check.corrupt", &self.check_corrupt),
        ] {
            if let Some(v) = v {
                doc.set(key, v);
            }
        }
        doc.set("trajectory_format", self.trajectory_format.as_str());
        let w = &self.loss.weights;
        doc.set("loss.photometric", f(w.photometric));
        doc.set("loss.ssim", f(w.ssim));
        doc.set("loss.smoothness", f(w.smoothness));
        doc.set("loss.scale_consistency", f(w.scale_consistency));
        doc.set("loss.cycle", f(w.cycle));
        doc.set("loss.residual_reg", f(w.residual_reg));
        let l = &self.loss;
        doc.set("loss.occlusion", l.occlusion);
        doc.set("loss.d_n", f(l.d_n));
        doc.set("loss.tau_z", f(l.tau_z));
        doc.set("loss.cycle_rotation_weight", f(l.cycle_rotation_weight));
        doc.set("loss.residual_lambda", f(l.residual_lambda));
        doc.set("loss.gate_weight", f(l.gate_weight));
        doc.set("loss.residual_magnitude", f(l.residual_magnitude));
        doc.set("loss.motion_smoothness", f(l.motion_smoothness));
        let o = &self.optimizer;
        doc.set("opt.schedule", self.schedule);
        doc.set("opt.levels", o.levels);
        doc.set("opt.budget", o.budget);
        doc.set("opt.tolerance", f(o.tolerance));
        doc.set("opt.window", o.window);
        doc.set("opt.scene_scale", f(o.scene_scale));
        doc.set("opt.gate_logit", f(o.gate_logit));
        doc.set("opt.coarse_smoothness", f(o.coarse_smoothness));
        doc.set("opt.coarse_tau", f(o.coarse_tau));
        doc.set("opt.occlusion_warmup", o.occlusion_warmup);
        doc.set("opt.early_exit", f(o.early_exit));
        doc.set("opt.lr_floor", f(o.lr_floor));
        if o.residual_level == usize::MAX {
            doc.set("opt.residual_level", "all");
        } else {
            doc.set("opt.residual_level", o.residual_level);
        }
        doc.set("opt.rigid_warmup", o.rigid_warmup);
        doc.set("adam.lr", f(o.adam.lr));
        doc.set("adam.beta1", f(o.adam.beta1));
        doc.set("adam.beta2", f(o.adam.beta2));
        doc.set("adam.eps", f(o.adam.eps));
        doc.set("rate.depth", f(o.rates.depth));
        doc.set("rate.rotation", f(o.rates.rotation));
        doc.set("rate.translation", f(o.rates.translation));
        doc.set("rate.residual", f(o.rates.residual));
        doc.set("rate.gate", f(o.rates.gate));
        doc.set("eval.format", self.format.map_or("auto", |f| f.as_str()));
        doc.set("eval.lengths", fmt_floats(&self.lengths));
        doc.set("eval.median_scale", self.median_scale);
        doc.set("eval.align", self.align);
        doc.set("eval.max_gap", f(self.max_gap));
        doc.set("check.configurations", self.check_configurations);
        doc
    }

    pub fn serialize(&self) -> String {
        self.to_doc().serialize()
    }
}
