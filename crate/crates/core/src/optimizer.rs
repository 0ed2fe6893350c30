//! Direct minimization of the triplet loss with Adam, coarse to fine.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{
    total_loss, FieldParams, LossBreakdown, LossOptions, ParamKind, ParamSet, TripletFrames, DIRECTIONS,
};
use crate::types::{softplus_inverse, ImageGrid, Intrinsics, PoseSE3, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            lr: 1e-3,
            eps: 1e-8,
        }
    }
}

/// Multipliers on the base learning rate, one per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub depth: f64,
    pub rotation: f64,
    pub translation: f64,
    pub residual: f64,
    pub gate: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        Self {
            depth: 50.0,
            rotation: 1.0,
            translation: 1.0,
            residual: 1.0,
            gate: 10.0,
        }
    }
}

impl GroupRates {
    pub fn uniform() -> Self {
        Self {
            depth: 1.0,
            rotation: 1.0,
            translation: 1.0,
            residual: 1.0,
            gate: 1.0,
        }
    }

    pub fn of(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::DepthLogit => self.depth,
            ParamKind::Rotation => self.rotation,
            ParamKind::Translation => self.translation,
            ParamKind::Residual => self.residual,
            ParamKind::GateLogit => self.gate,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.depth, self.rotation, self.translation, self.residual, self.gate];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument("learning-rate multipliers must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Moment accumulators for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of a flat vector.  `lr_scale` is either
/// empty (all ones) or one multiplier per entry.
pub fn adam_update(x: &mut [f64], g: &[f64], state: &mut AdamState, lr_scale: &[f64]) -> Result<()> {
    if x.len() != g.len() || x.len() != state.m.len() || (!lr_scale.is_empty() && lr_scale.len() != x.len()) {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            x.len(),
            g.len(),
            state.m.len()
        )));
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("entry {i}")));
    }
    let AdamHyper { beta1, beta2, lr, eps } = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..x.len() {
        let gi = g[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * gi;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * gi * gi;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        let s = if lr_scale.is_empty() { 1.0 } else { lr_scale[i] };
        x[i] -= lr * s * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam on a whole parameter set, with per-group rates.  A non-finite
/// gradient is rejected before anything changes and names its group.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, rates: &GroupRates) -> Result<()> {
    if params.len() != grads.len() || params.width() != grads.width() || params.height() != grads.height() {
        return Err(Error::ShapeMismatch("parameters and gradients differ in shape".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let g = grads.flatten();
    let mut x = params.flatten();
    let scale: Vec<f64> = params
        .slices()
        .into_iter()
        .flat_map(|(kind, s)| std::iter::repeat_n(rates.of(kind), s.len()))
        .collect();
    adam_update(&mut x, &g, state, &scale)?;
    params.assign(&x)
}

/// 2× area average.  Odd trailing rows and columns are dropped.
pub fn downsample(img: &ImageGrid) -> Result<ImageGrid> {
    let (w, h, c) = (img.width() / 2, img.height() / 2, img.channels());
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot halve a {}x{} grid",
            img.width(),
            img.height()
        )));
    }
    Ok(ImageGrid::from_fn(w, h, c, |x, y, ch| {
        0.25 * (img.get(2 * x, 2 * y, ch)
            + img.get(2 * x + 1, 2 * y, ch)
            + img.get(2 * x, 2 * y + 1, ch)
            + img.get(2 * x + 1, 2 * y + 1, ch))
    }))
}

/// Finest level first.
pub fn build_pyramid(img: &ImageGrid, levels: usize) -> Result<Vec<ImageGrid>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let need = 1usize << (levels - 1);
    if img.width() < need || img.height() < need {
        return Err(Error::InvalidArgument(format!(
            "{levels} levels need at least {need}x{need} pixels, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

pub fn pyramid_intrinsics(k: &Intrinsics, levels: usize) -> Vec<Intrinsics> {
    let mut out = vec![*k];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").halved();
        out.push(next);
    }
    out
}

/// Bilinear resize of a coarse grid to a finer `width`×`height`, using the
/// pixel-centre mapping of [`downsample`].
pub fn upsample(grid: &ImageGrid, width: usize, height: usize) -> ImageGrid {
    let (cw, ch) = (grid.width(), grid.height());
    let sx = cw as f64 / width as f64;
    let sy = ch as f64 / height as f64;
    ImageGrid::from_fn(width, height, grid.channels(), |x, y, c| {
        let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(cw - 1), (y0 + 1).min(ch - 1));
        let (ax, ay) = (u - x0 as f64, v - y0 as f64);
        let top = (1.0 - ax) * grid.get(x0, y0, c) + ax * grid.get(x1, y0, c);
        let bot = (1.0 - ax) * grid.get(x0, y1, c) + ax * grid.get(x1, y1, c);
        (1.0 - ay) * top + ay * bot
    })
}

/// Carries a solution from one level to a finer one.  Depth is resampled
/// in metric units and re-encoded; poses are resolution independent.
pub fn upsample_params(params: &ParamSet, width: usize, height: usize) -> ParamSet {
    let depth_logits = (0..3)
        .map(|f| upsample(&params.depth(f), width, height).map(|d| softplus_inverse(d.max(1e-6))))
        .collect();
    let fields = params
        .fields
        .iter()
        .map(|f| FieldParams {
            r0: f.r0,
            t0: f.t0,
            delta_t: upsample(&f.delta_t, width, height),
            gate_logits: upsample(&f.gate_logits, width, height),
        })
        .collect();
    ParamSet { depth_logits, fields }
}

fn downsample_params(params: &ParamSet) -> Result<ParamSet> {
    let mut depth_logits = Vec::with_capacity(3);
    for f in 0..3 {
        depth_logits.push(downsample(&params.depth(f))?.map(|d| softplus_inverse(d.max(1e-6))));
    }
    let mut fields = Vec::with_capacity(4);
    for f in &params.fields {
        fields.push(FieldParams {
            r0: f.r0,
            t0: f.t0,
            delta_t: downsample(&f.delta_t)?,
            gate_logits: downsample(&f.gate_logits)?,
        });
    }
    Ok(ParamSet { depth_logits, fields })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub levels: usize,
    /// Iterations summed over all levels.
    pub budget: usize,
    /// Bound on the relative change between the mean loss of the last
    /// `window` iterations and that of the `window` before them.
    pub tolerance: f64,
    pub window: usize,
    pub adam: AdamHyper,
    pub rates: GroupRates,
    /// Rough scene depth; the depth maps start at half of it.
    pub scene_scale: f64,
    pub gate_logit: f64,
    /// Smoothness multiplier at every level coarser than the input.
    pub coarse_smoothness: f64,
    /// `tau_z` multiplier per level of coarsening.
    pub coarse_tau: f64,
    /// Iterations at the start of each level that ignore visibility.
    pub occlusion_warmup: usize,
    /// An initial total below this ends the run before any step.
    pub early_exit: f64,
    /// Each level anneals its learning rate along a half cosine down to
    /// this fraction of the base rate.  1 keeps it constant.
    pub lr_floor: f64,
    /// The residual field and gate stay frozen at levels coarser than this
    /// (0 is the input) and for `rigid_warmup` iterations at the levels
    /// where they are free.
    pub residual_level: usize,
    pub rigid_warmup: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            budget: 2000,
            tolerance: 1e-3,
            window: 50,
            adam: AdamHyper::default(),
            rates: GroupRates::default(),
            scene_scale: 2.0,
            gate_logit: -2.0,
            coarse_smoothness: 2.0,
            coarse_tau: 2.0,
            occlusion_warmup: 50,
            early_exit: 1e-8,
            lr_floor: 1.0,
            residual_level: 2,
            rigid_warmup: 500,
        }
    }
}

impl OptimizerConfig {
    /// Schedule for scenes with independently moving objects.  The gates
    /// start half open and the residual field is free from the first
    /// iteration at every level; a rigid warm start would let the pose
    /// absorb the object's motion before the gates can claim it.  On static
    /// scenes the default rigid-first schedule recovers depth better.
    pub fn moving_objects() -> Self {
        Self { gate_logit: 0.0, residual_level: usize::MAX, rigid_warmup: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("levels must be >= 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be > 0".into()));
        }
        if self.window == 0 || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("convergence window and tolerance must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::InvalidArgument("Adam needs lr > 0, eps > 0, betas in [0, 1)".into()));
        }
        if !(self.scene_scale > 0.0) || !self.gate_logit.is_finite() {
            return Err(Error::InvalidArgument("scene scale must be > 0 and gate logit finite".into()));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return Err(Error::InvalidArgument("lr floor must lie in (0, 1]".into()));
        }
        if !(self.coarse_smoothness >= 0.0) || !(self.coarse_tau > 0.0) {
            return Err(Error::InvalidArgument("coarse multipliers must be positive".into()));
        }
        self.rates.validate()
    }

    /// Iterations granted to each level, coarsest first.  The input level
    /// gets a double share and any remainder.
    pub fn level_budgets(&self) -> Vec<usize> {
        let shares = self.levels + 1;
        let base = self.budget / shares;
        let mut out = vec![base; self.levels];
        let used: usize = base * (self.levels - 1);
        out[self.levels - 1] = self.budget - used;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletProblem {
    pub frames: TripletFrames,
    pub loss: LossOptions,
    pub config: OptimizerConfig,
    /// Starting point at the input resolution; defaults to constant depth,
    /// identity motion and mostly closed gates.
    pub init: Option<ParamSet>,
}

impl TripletProblem {
    pub fn new(frames: TripletFrames, loss: LossOptions, config: OptimizerConfig) -> Self {
        Self {
            frames,
            loss,
            config,
            init: None,
        }
    }

    pub fn default_init(&self) -> ParamSet {
        let id = PoseSE3::identity();
        ParamSet::from_init(
            self.frames.width(),
            self.frames.height(),
            0.5 * self.config.scene_scale,
            &[id.clone(), id.clone(), id.clone(), id],
            self.config.gate_logit,
        )
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.loss.validate()?;
        if let Some(p) = &self.init {
            if p.width() != self.frames.width() || p.height() != self.frames.height() || p.fields.len() != 4 {
                return Err(Error::ShapeMismatch("initial parameters do not match the frames".into()));
            }
        }
        let need = 1usize << (self.config.levels - 1);
        if self.frames.width() < need || self.frames.height() < need {
            return Err(Error::InvalidArgument(format!(
                "{} levels need at least {need}x{need} pixels",
                self.config.levels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Relative change fell below tolerance at the input level, or the
    /// starting point was already below the early-exit threshold.
    Converged,
    BudgetExhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// 0 is the input resolution.
    pub level: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSolution {
    pub params: ParamSet,
    pub trace: Vec<TraceRow>,
    pub status: Status,
    pub iterations: usize,
    /// Full-resolution loss of the starting point and of the result.
    pub initial: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub diagnostic: Option<String>,
}

impl TripletSolution {
    pub fn depths(&self) -> [ImageGrid; 3] {
        [self.params.depth(0), self.params.depth(1), self.params.depth(2)]
    }

    /// Motion of each direction in [`DIRECTIONS`] order: points of frame `a`
    /// to frame `b`.
    pub fn poses(&self) -> [PoseSE3; 4] {
        std::array::from_fn(|k| self.params.motion_field(k).pose())
    }

    pub fn pose_between(&self, a: usize, b: usize) -> Option<PoseSE3> {
        DIRECTIONS
            .iter()
            .position(|&(x, y, _)| x == a && y == b)
            .map(|k| self.params.motion_field(k).pose())
    }

    /// Camera-to-local poses with the middle frame as the origin.
    pub fn local_poses(&self) -> [PoseSE3; 3] {
        let p10 = self.pose_between(1, 0).expect("direction 1->0 exists");
        let p12 = self.pose_between(1, 2).expect("direction 1->2 exists");
        [p10.inverse(), PoseSE3::identity(), p12.inverse()]
    }

    pub fn gate(&self, k: usize) -> ImageGrid {
        self.params.motion_field(k).gate
    }
}

struct Level {
    frames: TripletFrames,
    opts: LossOptions,
}

fn build_levels(problem: &TripletProblem) -> Result<Vec<Level>> {
    let n = problem.config.levels;
    let pyramids: Vec<Vec<ImageGrid>> = problem
        .frames
        .images
        .iter()
        .map(|img| build_pyramid(img, n))
        .collect::<Result<_>>()?;
    let ks = pyramid_intrinsics(&problem.frames.intrinsics, n);
    let mut out = Vec::with_capacity(n);
    for (l, k) in ks.into_iter().enumerate() {
        let images = std::array::from_fn(|f| pyramids[f][l].clone());
        let mut opts = problem.loss.clone();
        if l > 0 {
            opts.smoothness_scale *= problem.config.coarse_smoothness;
            opts.tau_z *= problem.config.coarse_tau.powi(l as i32);
        }
        let mut frames = TripletFrames::new(images, k)?;
        for (f, anchor) in problem.frames.anchors.iter().enumerate() {
            if let Some(a) = anchor {
                let mut d = a.clone();
                for _ in 0..l {
                    d = downsample(&d)?;
                }
                frames = frames.with_anchor(f, d)?;
            }
        }
        out.push(Level {
            frames,
            opts,
        });
    }
    Ok(out)
}

enum LevelEnd {
    Converged,
    Budget,
    Diverged(String),
}

fn is_finite_breakdown(b: &LossBreakdown) -> bool {
    b.total.is_finite() && b.terms().iter().all(|t| t.is_finite())
}

/// Runs coarse to fine.  Every iteration appends the loss at the current
/// parameters and then takes one Adam step.
pub fn optimize_triplet(problem: &TripletProblem) -> Result<TripletSolution> {
    problem.validate()?;
    let cfg = &problem.config;
    let start = problem.init.clone().unwrap_or_else(|| problem.default_init());
    let (initial, _) = total_loss(&problem.frames, &start, &problem.loss)?;
    if !is_finite_breakdown(&initial) {
        return Err(Error::InvalidArgument("loss at the starting point is not finite".into()));
    }
    if initial.total < cfg.early_exit {
        return Ok(TripletSolution {
            params: start,
            trace: Vec::new(),
            status: Status::Converged,
            iterations: 0,
            final_loss: initial.clone(),
            initial,
            diagnostic: None,
        });
    }

    let levels = build_levels(problem)?;
    let budgets = cfg.level_budgets();
    // Coarsest level first; the starting point is pooled down to it.
    let mut params = start.clone();
    let mut coarse = Vec::with_capacity(cfg.levels);
    coarse.push(start.clone());
    for _ in 1..cfg.levels {
        let next = downsample_params(coarse.last().expect("non-empty"))?;
        coarse.push(next);
    }
    let mut trace = Vec::new();
    let mut carry = 0usize;
    let mut status = Status::BudgetExhausted;
    let mut diagnostic = None;

    for (step, l) in (0..cfg.levels).rev().enumerate() {
        let level = &levels[l];
        let cur = if step == 0 {
            coarse[l].clone()
        } else {
            upsample_params(&params, level.frames.width(), level.frames.height())
        };
        let allowance = budgets[step] + carry;
        let (end, used, last_good) = run_level(level, cur, cfg, l, allowance, &mut trace)?;
        params = last_good;
        carry = allowance - used;
        match end {
            LevelEnd::Diverged(msg) => {
                status = Status::Diverged;
                diagnostic = Some(format!("level {l}: {msg}"));
                // Bring the last finite state to the input resolution.
                if l > 0 {
                    params = upsample_params(&params, problem.frames.width(), problem.frames.height());
                }
                break;
            }
            LevelEnd::Converged if l == 0 => status = Status::Converged,
            LevelEnd::Converged | LevelEnd::Budget => {}
        }
    }

    let (mut final_loss, _) = total_loss(&problem.frames, &params, &problem.loss)?;
    if !is_finite_breakdown(&final_loss) || final_loss.total > initial.total {
        let note = format!("result loss {} above the start {}; kept the start", final_loss.total, initial.total);
        diagnostic = Some(match diagnostic {
            Some(d) => format!("{d}; {note}"),
            None => note,
        });
        params = start;
        final_loss = initial.clone();
    }
    Ok(TripletSolution {
        params,
        iterations: trace.len(),
        trace,
        status,
        initial,
        final_loss,
        diagnostic,
    })
}

fn run_level(
    level: &Level,
    mut params: ParamSet,
    cfg: &OptimizerConfig,
    l: usize,
    allowance: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<(LevelEnd, usize, ParamSet)> {
    let mut state = AdamState::new(params.len(), cfg.adam);
    let mut history: Vec<f64> = Vec::with_capacity(allowance);
    let mut rigid = cfg.rates;
    rigid.residual = 0.0;
    rigid.gate = 0.0;
    let warm_opts = LossOptions {
        occlusion: false,
        ..level.opts.clone()
    };
    for it in 0..allowance {
        let opts = if it < cfg.occlusion_warmup && level.opts.occlusion {
            &warm_opts
        } else {
            &level.opts
        };
        let (b, g) = match total_loss(&level.frames, &params, opts) {
            Ok(v) => v,
            Err(Error::NonFiniteGradient(name)) => {
                return Ok((LevelEnd::Diverged(format!("non-finite gradient in {name}")), it, params));
            }
            Err(e) => return Err(e),
        };
        if !is_finite_breakdown(&b) {
            return Ok((LevelEnd::Diverged("non-finite loss".into()), it, params));
        }
        let total = b.total;
        trace.push(TraceRow {
            iteration: trace.len(),
            level: l,
            breakdown: b,
        });
        history.push(total);
        // Measured only once the visibility test is active and every group
        // this level optimizes has been released.
        let warmup = if l > cfg.residual_level { cfg.occlusion_warmup } else { cfg.occlusion_warmup.max(cfg.rigid_warmup) };
        if it + 1 >= warmup + 2 * cfg.window {
            let n = history.len();
            let recent: f64 = history[n - cfg.window..].iter().sum();
            let before: f64 = history[n - 2 * cfg.window..n - cfg.window].iter().sum();
            let rel = (before - recent).abs() / before.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.tolerance {
                return Ok((LevelEnd::Converged, it + 1, params));
            }
        }
        let phase = std::f64::consts::PI * it as f64 / allowance as f64;
        state.hyper.lr = cfg.adam.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + phase.cos()));
        let mut next = params.clone();
        let rates = if l > cfg.residual_level || it < cfg.rigid_warmup {
            &rigid
        } else {
            &cfg.rates
        };
        if let Err(e) = adam_step(&mut next, &g, &mut state, rates) {
            return match e {
                Error::NonFiniteGradient(name) => Ok((LevelEnd::Diverged(format!("non-finite gradient in {name}")), it + 1, params)),
                e => Err(e),
            };
        }
        if next.first_non_finite().is_some() {
            return Ok((LevelEnd::Diverged("parameters became non-finite".into()), it + 1, params));
        }
        params = next;
    }
    Ok((LevelEnd::Budget, allowance, params))
}

/// Solves many triplets independently, in parallel.  Results keep input
/// order and do not depend on the thread count.
pub fn optimize_many(problems: &[TripletProblem]) -> Vec<Result<TripletSolution>> {
    problems.par_iter().map(optimize_triplet).collect()
}

/// Solves consecutive overlapping triplets in order.  From the second
/// triplet on, its first two frames are anchored to the depths the
/// previous triplet found for them, so the scale term carries one scale
/// along the sequence.  Anchors already present on the input are replaced.
pub fn optimize_sequence(triplets: &[TripletFrames], loss: &LossOptions, config: &OptimizerConfig) -> Result<Vec<TripletSolution>> {
    let mut out: Vec<TripletSolution> = Vec::with_capacity(triplets.len());
    for frames in triplets {
        let mut frames = frames.clone();
        frames.anchors = [None, None, None];
        if let Some(prev) = out.last() {
            let d = prev.depths();
            frames = frames.with_anchor(0, d[1].clone())?.with_anchor(1, d[2].clone())?;
        }
        out.push(optimize_triplet(&TripletProblem::new(frames, loss.clone(), config.clone()))?);
    }
    Ok(out)
}

/// Consecutive triplets of a frame sequence: triplet `i` holds frames
/// `i, i+1, i+2`.
pub fn sequence_triplets(frames: &[ImageGrid], k: &Intrinsics) -> Result<Vec<TripletFrames>> {
    if frames.len() < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 frames, got {}", frames.len())));
    }
    frames
        .windows(3)
        .map(|w| TripletFrames::new([w[0].clone(), w[1].clone(), w[2].clone()], *k))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    /// Camera-to-world poses, frame 0 at the identity.
    pub trajectory: Trajectory,
    /// For each neighbouring pair of triplets, the median ratio of the
    /// later triplet's depth to the earlier one's over the shared frames.
    pub scale_ratios: Vec<f64>,
}

impl ChainResult {
    pub fn max_ratio_deviation(&self) -> f64 {
        self.scale_ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max)
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median of `b / a` over pixels where both are positive and finite.
pub fn median_ratio(a: &ImageGrid, b: &ImageGrid) -> Option<f64> {
    let r: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| x.is_finite() && y.is_finite() && **x > 0.0 && **y > 0.0)
        .map(|(x, y)| y / x)
        .collect();
    median(r)
}

/// Stitches triplet solutions that overlap by two frames into one
/// trajectory.  Each new frame is placed with its triplet's own motion
/// from the shared middle frame; no rescaling is applied, so the ratios
/// expose how far the scale drifts from one triplet to the next.
pub fn chain_sequence(solutions: &[TripletSolution]) -> Result<ChainResult> {
    let Some(first) = solutions.first() else {
        return Err(Error::InvalidArgument("no triplets to chain".into()));
    };
    let (w, h) = (first.params.width(), first.params.height());
    if solutions.iter().any(|s| s.params.width() != w || s.params.height() != h) {
        return Err(Error::InvalidArgument("triplets do not overlap: resolutions differ".into()));
    }
    let local = first.local_poses();
    let mut world: Vec<PoseSE3> = local.to_vec();
    // Re-anchor so frame 0 is the identity.
    let anchor = world[0].inverse();
    for p in &mut world {
        *p = anchor.compose(p);
    }
    let mut ratios = Vec::with_capacity(solutions.len().saturating_sub(1));
    for i in 1..solutions.len() {
        let prev = &solutions[i - 1];
        let cur = &solutions[i];
        let prev_d = prev.depths();
        let cur_d = cur.depths();
        // Shared frames: prev 1,2 are cur 0,1.
        let mut r = Vec::new();
        for (pa, ca) in [(1, 0), (2, 1)] {
            for (x, y) in prev_d[pa].data().iter().zip(cur_d[ca].data()) {
                if *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite() {
                    r.push(y / x);
                }
            }
        }
        let ratio = median(r).ok_or_else(|| Error::Degenerate("no shared depth to compare".into()))?;
        ratios.push(ratio);
        // cur's middle frame is global frame i+1.
        let mid = world[i + 1].clone();
        let next = mid.compose(&cur.local_poses()[2]);
        world.push(next);
    }
    Ok(ChainResult {
        trajectory: Trajectory::from_poses(world),
        scale_ratios: ratios,
    })
}

/// Translation direction error in degrees.
pub fn direction_error_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm()).max(f64::MIN_POSITIVE);
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

#[cfg(test)]
mod tests;
