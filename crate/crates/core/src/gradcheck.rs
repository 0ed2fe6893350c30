//! Central finite-difference checks of every analytic gradient in the crate.
//!
//! Each check draws seeded random configurations, compares the analytic
//! gradient with `(f(x + h) − f(x − h)) / 2h` on a set of coordinates and
//! keeps the worst relative error.  Coordinates whose perturbation changes a
//! discrete branch (a bilinear cell, the sign inside an absolute value, a ReLU
//! or max-pooling choice, validity) are skipped: the derivative is not defined
//! there.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{de_backward, de_forward, DeParams, FeatureBlock};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_sample, lattice_distance, sample_along, Correspondence, MotionGrad};
use crate::losses::{total_loss_with_masks, LossOptions, LossWeights, ParamSet, TripletFrames, DIRECTIONS};
use crate::motion::MotionField;
use crate::types::{sigmoid, softplus, softplus_inverse, ImageGrid, Intrinsics};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error, so gradients that vanish
/// analytically are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-5;

/// Every check as `(name, module)`.
pub const CHECKS: [(&str, &str); 10] = [
    ("photometric", "losses"),
    ("ssim", "losses"),
    ("smoothness", "losses"),
    ("scale_consistency", "losses"),
    ("cycle", "losses"),
    ("residual_reg", "losses"),
    ("warp", "geometry"),
    ("bilinear_sampler", "geometry"),
    ("attention_de", "attention_de"),
    ("softplus", "core_types"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    /// Configurations per check.
    pub configurations: usize,
    /// Test hook: scales the analytic gradient of the named check by 1.01.
    pub corrupt: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configurations: 100,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub module: &'static str,
    pub configurations: usize,
    pub coordinates: usize,
    /// Coordinates skipped because the perturbation crossed a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.coordinates > 0 && self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(SCALE_FLOOR)
}

/// Runs all checks, in parallel over checks.
pub fn run_all(opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    CHECKS.par_iter().map(|(name, _)| run_check(name, opts)).collect()
}

pub fn run_check(name: &str, opts: &CheckOptions) -> Result<CheckReport> {
    let (index, &(name, module)) = CHECKS
        .iter()
        .enumerate()
        .find(|(_, (n, _))| *n == name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown gradient check `{name}`")))?;
    if opts.configurations == 0 {
        return Err(Error::InvalidArgument("need at least one configuration".into()));
    }
    let factor = if opts.corrupt.as_deref() == Some(name) { 1.01 } else { 1.0 };
    let mut acc = Acc::new(factor);
    let mut configurations = 0;
    let mut attempt = 0u64;
    while configurations < opts.configurations {
        if attempt >= 20 * opts.configurations as u64 {
            return Err(Error::Degenerate(format!(
                "`{name}`: only {configurations} usable configurations in {attempt} draws"
            )));
        }
        let seed = opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((index as u64) << 40) ^ attempt;
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let before = acc.coordinates;
        match name {
            "warp" => check_warp(&mut rng, &mut acc)?,
            "bilinear_sampler" => check_bilinear(&mut rng, &mut acc),
            "attention_de" => check_de(&mut rng, &mut acc)?,
            "softplus" => check_softplus(&mut rng, &mut acc),
            term => check_term(term, &mut rng, &mut acc)?,
        }
        if acc.coordinates > before {
            configurations += 1;
        }
    }
    Ok(CheckReport {
        name,
        module,
        configurations,
        coordinates: acc.coordinates,
        skipped: acc.skipped,
        max_rel_err: acc.worst,
    })
}

struct Acc {
    factor: f64,
    coordinates: usize,
    skipped: usize,
    worst: f64,
}

impl Acc {
    fn new(factor: f64) -> Self {
        Self {
            factor,
            coordinates: 0,
            skipped: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, fd: f64) {
        self.coordinates += 1;
        self.worst = self.worst.max(rel_err(analytic * self.factor, fd));
    }

    /// Central difference of `f` at `x`, or `None` when the branch signature
    /// differs at either end.
    fn diff<S: PartialEq>(&mut self, x: f64, h: f64, mut f: impl FnMut(f64) -> (f64, S), base: &S) -> Option<f64> {
        let (hi, sh) = f(x + h);
        let (lo, sl) = f(x - h);
        if &sh != base || &sl != base {
            self.skipped += 1;
            return None;
        }
        Some((hi - lo) / (2.0 * h))
    }
}

#[inline]
fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn signum(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn random_problem(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (TripletFrames, ParamSet) {
    // Frames sit at distinct brightness and depth levels so that absolute
    // values are rarely evaluated near zero.
    let phase: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..6.28)).collect();
    let images = [0, 1, 2].map(|f| {
        ImageGrid::from_fn(w, h, 3, |x, y, c| {
            let (x, y) = (x as f64, y as f64);
            0.25 + 0.25 * f as f64
                + 0.08 * (0.9 * x + phase[c]).sin() * (0.7 * y + phase[3 + c]).cos()
                + 0.04 * (0.5 * x - 0.8 * y + phase[6 + c]).sin()
        })
    });
    let k = Intrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
        .expect("positive focal lengths");
    let frames = TripletFrames::new(images, k).expect("consistent frames");
    let mut params = ParamSet::zeros(w, h);
    for (f, d) in params.depth_logits.iter_mut().enumerate() {
        let lo = 2.0 + f as f64;
        for v in d.data_mut() {
            *v = softplus_inverse(rng.random_range(lo..lo + 0.5));
        }
    }
    for f in &mut params.fields {
        for i in 0..3 {
            f.r0[i] = rng.random_range(-0.03..0.03);
            f.t0[i] = rng.random_range(-0.15..0.15);
        }
        for v in f.delta_t.data_mut() {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            *v = sign * rng.random_range(0.005..0.05);
        }
        for v in f.gate_logits.data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    (frames, params)
}

/// Discrete state of the triplet losses: validity and bilinear cell of every
/// match, and the signs inside each absolute value.
fn loss_branches(frames: &TripletFrames, params: &ParamSet) -> Vec<i64> {
    let mut out = Vec::new();
    for (dir, &(a, b, _)) in DIRECTIONS.iter().enumerate() {
        let Ok(corr) = Correspondence::from_field(&params.depth(a), &frames.intrinsics, &params.motion_field(dir)) else {
            out.push(i64::MIN);
            continue;
        };
        let (warped, _) = sample_along(&frames.images[b], &corr);
        let (sampled, _) = sample_along(&params.depth(b), &corr);
        let projected = corr.projected_depth();
        for (p, m) in corr.matches.iter().enumerate() {
            if !m.is_valid() {
                out.push(-1);
                continue;
            }
            out.push(m.coords[0].floor() as i64);
            out.push(m.coords[1].floor() as i64);
            out.push(signum(projected.data()[p] - sampled.data()[p]) as i64);
            for c in 0..3 {
                out.push(signum(warped.pixel(p)[c] - frames.images[a].pixel(p)[c]) as i64);
            }
        }
    }
    for f in &params.fields {
        out.extend(f.delta_t.data().iter().map(|&v| signum(v) as i64));
    }
    out
}

/// One loss term through the full triplet objective, with every other weight
/// at zero and visibility frozen.
fn check_term(term: &str, rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let mut weights = LossWeights::zero();
    match term {
        "photometric" => weights.photometric = 1.0,
        "ssim" => weights.ssim = 1.0,
        "smoothness" => weights.smoothness = 1.0,
        "scale_consistency" => weights.scale_consistency = 1.0,
        "cycle" => weights.cycle = 1.0,
        "residual_reg" => weights.residual_reg = 1.0,
        _ => unreachable!("term names come from CHECKS"),
    }
    let opts = LossOptions {
        weights,
        occlusion: false,
        ..LossOptions::default()
    };
    let (frames, params) = random_problem(rng, 6, 6);
    let (_, grads, masks) = total_loss_with_masks(&frames, &params, &opts, None)?;
    let base = loss_branches(&frames, &params);
    let x = params.flatten();
    let g = grads.flatten();
    // Depth logits come first, then per field r0, t0, δt, gate logits.
    let (w, h) = (frames.width(), frames.height());
    let depth_len = 3 * w * h;
    let field_len = 6 + 4 * w * h;
    let mut coords: Vec<usize> = (0..4).flat_map(|k| (0..6).map(move |j| depth_len + k * field_len + j)).collect();
    for _ in 0..16 {
        coords.push(rng.random_range(0..x.len()));
    }
    for i in coords {
        let f = |v: f64| {
            let mut xs = x.clone();
            xs[i] = v;
            let mut p = params.clone();
            p.assign(&xs).expect("same layout");
            let (b, _, _) = total_loss_with_masks(&frames, &p, &opts, Some(&masks)).expect("valid problem");
            (b.total, loss_branches(&frames, &p))
        };
        if let Some(fd) = acc.diff(x[i], step(x[i]), f, &base) {
            acc.record(g[i], fd);
        }
    }
    Ok(())
}

fn random_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> MotionField {
    MotionField {
        r0: Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05)),
        t0: Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)),
        delta_t: ImageGrid::from_fn(w, h, 3, |_, _, _| rng.random_range(-0.2..0.2)),
        gate: ImageGrid::from_fn(w, h, 1, |_, _, _| rng.random_range(0.05..0.95)),
    }
}

/// Weighted sum of the match coordinates and transformed depths.
fn warp_objective(depth: &ImageGrid, k: &Intrinsics, field: &MotionField, c: &[[f64; 3]]) -> (f64, Vec<bool>) {
    let corr = Correspondence::from_field(depth, k, field).expect("positive depth");
    let mut total = 0.0;
    let valid: Vec<bool> = corr.matches.iter().map(|m| m.is_valid()).collect();
    for (m, w) in corr.matches.iter().zip(c) {
        if m.is_valid() {
            total += w[0] * m.coords[0] + w[1] * m.coords[1] + w[2] * m.point.z;
        }
    }
    (total, valid)
}

/// Correspondence backpropagation w.r.t. depth and every motion parameter.
fn check_warp(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let (w, h) = (6, 5);
    let k = Intrinsics::new(6.0, 6.0, 2.5, 2.0)?;
    let depth = ImageGrid::from_fn(w, h, 1, |_, _, _| rng.random_range(2.0..5.0));
    let field = random_field(rng, w, h);
    let c: Vec<[f64; 3]> = (0..w * h).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
    let corr = Correspondence::from_field(&depth, &k, &field)?;
    let upstream: Vec<[f64; 3]> = corr
        .matches
        .iter()
        .zip(&c)
        .map(|(m, w)| if m.is_valid() { *w } else { [0.0; 3] })
        .collect();
    let mut depth_grad = ImageGrid::zeros(w, h, 1);
    let mut g = MotionGrad::zeros(w, h);
    corr.backprop(&upstream, &mut depth_grad, &mut g);
    let base: Vec<bool> = corr.matches.iter().map(|m| m.is_valid()).collect();

    type Slot = for<'a> fn(&'a mut ImageGrid, &'a mut MotionField) -> &'a mut [f64];
    let slots: [Slot; 5] = [
        |d, _| d.data_mut(),
        |_, f| f.r0.as_mut_slice(),
        |_, f| f.t0.as_mut_slice(),
        |_, f| f.delta_t.data_mut(),
        |_, f| f.gate.data_mut(),
    ];
    let mut grad_depth = depth_grad.clone();
    let mut grad_field = MotionField {
        r0: g.r0,
        t0: g.t0,
        delta_t: g.delta_t.clone(),
        gate: g.gate.clone(),
    };
    for (s, slot) in slots.iter().enumerate() {
        let len = slot(&mut depth.clone(), &mut field.clone()).len();
        let picks: Vec<usize> = if len <= 3 { (0..len).collect() } else { (0..6).map(|_| rng.random_range(0..len)).collect() };
        for i in picks {
            let x0 = slot(&mut depth.clone(), &mut field.clone())[i];
            let analytic = slot(&mut grad_depth, &mut grad_field)[i];
            let f = |v: f64| {
                let (mut d, mut fl) = (depth.clone(), field.clone());
                slot(&mut d, &mut fl)[i] = v;
                warp_objective(&d, &k, &fl, &c)
            };
            // The gate is a value in [0, 1], not a logit; keep perturbations inside.
            let hstep = if s == 4 { 1e-5 } else { step(x0) };
            if let Some(fd) = acc.diff(x0, hstep, f, &base) {
                acc.record(analytic, fd);
            }
        }
    }
    Ok(())
}

/// Spatial gradient of the bilinear sampler at an interior point, h = 1e-4.
fn check_bilinear(rng: &mut ChaCha8Rng, acc: &mut Acc) {
    let (w, h) = (7, 6);
    let phase: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..6.28)).collect();
    let img = ImageGrid::from_fn(w, h, 2, |x, y, c| {
        0.5 + 0.3 * (0.8 * x as f64 + phase[c]).sin() * (0.6 * y as f64 + phase[2 + c]).cos()
    });
    let (u, v) = loop {
        let u = rng.random_range(0.0..(w - 1) as f64);
        let v = rng.random_range(0.0..(h - 1) as f64);
        if lattice_distance(u, v) >= 1e-3 {
            break (u, v);
        }
    };
    let weights = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let objective = |u: f64, v: f64| {
        let s = bilinear_sample(&img, &[[u, v]]);
        (0..2).map(|c| weights[c] * s.values[c]).sum::<f64>()
    };
    let s = bilinear_sample(&img, &[[u, v]]);
    let analytic: [f64; 2] = [0, 1].map(|axis| (0..2).map(|c| weights[c] * s.gradients[c][axis]).sum());
    for (axis, &an) in analytic.iter().enumerate() {
        let x0 = if axis == 0 { u } else { v };
        let f = |x: f64| {
            let value = if axis == 0 { objective(x, v) } else { objective(u, x) };
            (value, ())
        };
        if let Some(fd) = acc.diff(x0, 1e-4, f, &()) {
            acc.record(an, fd);
        }
    }
}

/// Input and parameter gradients of the attention block on an 8×4×4 block.
fn check_de(rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<()> {
    let (c, h, w) = (8, 4, 4);
    let block = |rng: &mut ChaCha8Rng| {
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureBlock::from_vec(c, h, w, data)
    };
    let f = block(rng)?;
    let weights = block(rng)?;
    let p = DeParams::random(c, 4, 7, 0.5, rng)?;
    let (_, cache) = de_forward(&f, &p)?;
    let base = cache.branches();
    let g = de_backward(&cache, &p, &weights)?;
    let objective = |f: &FeatureBlock, p: &DeParams| {
        let (out, cache) = de_forward(f, p).expect("matching shapes");
        let v = out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();
        (v, cache.branches())
    };
    for _ in 0..16 {
        let i = rng.random_range(0..f.data().len());
        let x0 = f.data()[i];
        let fun = |v: f64| {
            let mut ff = f.clone();
            ff.data_mut()[i] = v;
            objective(&ff, &p)
        };
        if let Some(fd) = acc.diff(x0, step(x0), fun, &base) {
            acc.record(g.input.data()[i], fd);
        }
    }
    let values = p.values();
    let gv = g.params.values();
    for _ in 0..16 {
        let i = rng.random_range(0..values.len());
        let fun = |v: f64| {
            let mut pp = p.clone();
            *pp.values_mut().nth(i).expect("index within parameters") = v;
            objective(&f, &pp)
        };
        if let Some(fd) = acc.diff(values[i], step(values[i]), fun, &base) {
            acc.record(gv[i], fd);
        }
    }
    Ok(())
}

/// The depth parameterization, on both sides of the linear cutover.
fn check_softplus(rng: &mut ChaCha8Rng, acc: &mut Acc) {
    for _ in 0..4 {
        let l = rng.random_range(-35.0..35.0);
        if let Some(fd) = acc.diff(l, step(l), |v| (softplus(v), ()), &()) {
            acc.record(sigmoid(l), fd);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(corrupt: Option<&str>) -> CheckOptions {
        CheckOptions {
            seed: 3,
            configurations: 10,
            corrupt: corrupt.map(str::to_string),
        }
    }

    #[test]
    fn every_check_passes() {
        for r in run_all(&quick(None)).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_err);
            assert_eq!(r.configurations, 10);
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = run_check("cycle", &quick(Some("cycle"))).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err > 1e-3);
        assert!(run_check("ssim", &quick(Some("cycle"))).unwrap().passed());
    }

    #[test]
    fn report_covers_every_module() {
        let reports = run_all(&quick(None)).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.name).collect();
        for term in ["photometric", "ssim", "smoothness", "scale_consistency", "cycle", "residual_reg"] {
            assert!(names.contains(&term));
        }
        for module in ["losses", "geometry", "attention_de"] {
            assert!(reports.iter().any(|r| r.module == module));
        }
        assert!(run_check("nope", &quick(None)).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(run_check("warp", &quick(None)).unwrap(), run_check("warp", &quick(None)).unwrap());
    }
}
