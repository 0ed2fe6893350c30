//! Trajectory and depth scoring: similarity alignment, ATE, segment-wise
//! relative errors and the usual seven depth columns.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{orthonormalize, ImageGrid, PoseSE3, Trajectory};

/// Segment lengths in metres for the relative error tables.
pub const SEGMENT_LENGTHS: [f64; 5] = [7.0, 14.0, 21.0, 28.0, 35.0];

/// Ground-truth depth outside this range does not count.
pub const DEPTH_EVAL_MIN: f64 = 0.1;
pub const DEPTH_EVAL_MAX: f64 = 80.0;

/// Largest timestamp gap accepted when pairing poses from files.
pub const MAX_ASSOCIATION_GAP: f64 = 0.02;

/// `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Sim3 {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("similarity scale must be positive, got {scale}")));
        }
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(drift <= 1e-9) || !(rotation.determinant() > 0.0) {
            return Err(Error::InvalidArgument(format!("rotation is not orthonormal (drift {drift:e})")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * p + self.translation
    }

    /// Moves a camera-to-world pose into the aligned frame.
    pub fn apply_pose(&self, pose: &PoseSE3) -> PoseSE3 {
        PoseSE3::from_parts_projected(self.rotation * pose.rotation(), self.apply(pose.translation()))
    }

    pub fn apply_trajectory(&self, traj: &Trajectory) -> Result<Trajectory> {
        Trajectory::new(traj.stamps().to_vec(), traj.poses().iter().map(|p| self.apply_pose(p)).collect())
    }
}

fn check_pair(est: &Trajectory, gt: &Trajectory, min: usize) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated poses for {} ground-truth poses",
            est.len(),
            gt.len()
        )));
    }
    if est.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} poses, got {}", est.len())));
    }
    Ok(())
}

/// Least-squares similarity taking estimated positions onto ground truth,
/// in closed form (Umeyama).  Poses pair up by index.
///
/// Positions that all coincide or lie on one line leave the rotation
/// undetermined; those are reported as [`Error::Degenerate`] together with
/// the singular values of the cross-covariance.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory) -> Result<Sim3> {
    check_pair(est, gt, 3)?;
    let pe = est.positions();
    let pg = gt.positions();
    let n = pe.len() as f64;
    let me = pe.iter().sum::<Vector3<f64>>() / n;
    let mg = pg.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in pe.iter().zip(&pg) {
        let (de, dg) = (e - me, g - mg);
        cov += dg * de.transpose();
        var_e += de.norm_squared();
    }
    cov /= n;
    var_e /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..3).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    let cond = format!(
        "cross-covariance singular values {:.3e}, {:.3e}, {:.3e}",
        sv[0].0, sv[1].0, sv[2].0
    );
    if !(var_e > 0.0) || !(sv[0].0 > 0.0) {
        return Err(Error::Degenerate(format!("positions do not spread ({cond})")));
    }
    if sv[1].0 <= 1e-10 * sv[0].0 {
        return Err(Error::Degenerate(format!("positions are collinear ({cond})")));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        s[(sv[2].1, sv[2].1)] = -1.0;
    }
    let rotation = orthonormalize(&(u * s * vt));
    let trace_ds: f64 = (0..3).map(|i| svd.singular_values[i] * s[(i, i)]).sum();
    let scale = trace_ds / var_e;
    let translation = mg - scale * rotation * me;
    Sim3::new(scale, rotation, translation)
}

/// Root-mean-square position error after applying `alignment` to `est`.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, alignment: &Sim3) -> Result<f64> {
    check_pair(est, gt, 1)?;
    let pe = est.positions();
    let pg = gt.positions();
    let sum: f64 = pe.iter().zip(&pg).map(|(e, g)| (alignment.apply(e) - g).norm_squared()).sum();
    Ok((sum / pe.len() as f64).sqrt())
}

/// Pairs every estimated pose with the ground-truth pose nearest in time,
/// dropping estimates with no partner within `max_gap` seconds.  Each
/// ground-truth pose is used at most once.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_gap: f64) -> Result<(Trajectory, Trajectory)> {
    let gs = gt.stamps();
    let mut used = vec![false; gs.len()];
    let (mut es, mut ep, mut gsel, mut gp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (t, pose) in est.stamps().iter().zip(est.poses()) {
        let j = gs.partition_point(|g| g < t);
        let best = [j.checked_sub(1), (j < gs.len()).then_some(j)]
            .into_iter()
            .flatten()
            .filter(|&k| !used[k])
            .min_by(|&a, &b| (gs[a] - t).abs().total_cmp(&(gs[b] - t).abs()));
        if let Some(k) = best.filter(|&k| (gs[k] - t).abs() <= max_gap) {
            used[k] = true;
            es.push(*t);
            ep.push(pose.clone());
            gsel.push(gs[k]);
            gp.push(gt.poses()[k].clone());
        }
    }
    if es.is_empty() {
        return Err(Error::InvalidArgument(format!("no poses within {max_gap} s of each other")));
    }
    Ok((Trajectory::new(es, ep)?, Trajectory::new(gsel, gp)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentRow {
    pub length: f64,
    /// Translation error, percent of the distance travelled.
    pub t_err: f64,
    /// Rotation error, degrees per 100 m.
    pub r_err: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentReport {
    /// One row per requested length that has at least one segment.
    pub rows: Vec<SegmentRow>,
    /// Means over all segments of all lengths.
    pub t_err: f64,
    pub r_err: f64,
    pub diagnostic: Option<String>,
}

impl SegmentReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Rotation angle from the trace (clamped) for the cosine and the skew part
/// for the sine.  Unlike `acos` alone this is exactly zero for `RᵀR` with
/// identical factors and stays accurate for small errors.
fn error_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * axis.norm()).atan2(c)
}

/// Relative errors over sub-trajectories of the given ground-truth path
/// lengths.  From every start index, a segment ends at the first pose whose
/// travelled distance exceeds the length; errors are normalized by the
/// ground-truth distance actually covered by the segment.
pub fn segment_rpe(est: &Trajectory, gt: &Trajectory, lengths: &[f64]) -> Result<SegmentReport> {
    check_pair(est, gt, 1)?;
    if lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument("segment lengths must be positive".into()));
    }
    let dist = gt.arc_lengths();
    let (ge, gg) = (est.poses(), gt.poses());
    let mut rows = Vec::new();
    let (mut t_all, mut r_all, mut n_all) = (0.0, 0.0, 0usize);
    for &len in lengths {
        let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
        for i in 0..dist.len() {
            let goal = dist[i] + len;
            let j = i + dist[i..].partition_point(|d| *d <= goal);
            if j >= dist.len() {
                break;
            }
            let covered = dist[j] - dist[i];
            let rel_gt = gg[i].inverse().compose(&gg[j]);
            let rel_est = ge[i].inverse().compose(&ge[j]);
            let err = rel_gt.inverse().compose(&rel_est);
            t_sum += 100.0 * err.translation().norm() / covered;
            r_sum += 100.0 * error_angle(err.rotation()).to_degrees() / covered;
            count += 1;
        }
        if count > 0 {
            rows.push(SegmentRow {
                length: len,
                t_err: t_sum / count as f64,
                r_err: r_sum / count as f64,
                segments: count,
            });
            t_all += t_sum;
            r_all += r_sum;
            n_all += count;
        }
    }
    let total = dist.last().copied().unwrap_or(0.0);
    let diagnostic = if n_all == 0 {
        let shortest = lengths.iter().copied().fold(f64::INFINITY, f64::min);
        Some(format!("trajectory covers {total:.3} m, shorter than the shortest segment ({shortest} m)"))
    } else if rows.len() < lengths.len() {
        Some(format!("trajectory covers {total:.3} m; longer segments skipped"))
    } else {
        None
    };
    let (t_err, r_err) = if n_all == 0 {
        (0.0, 0.0)
    } else {
        (t_all / n_all as f64, r_all / n_all as f64)
    };
    Ok(SegmentReport {
        rows,
        t_err,
        r_err,
        diagnostic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 7] = ["abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3"];

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rms,
            self.rms_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Per-image metrics averaged column by column.
    pub fn mean(all: &[DepthMetrics]) -> Result<DepthMetrics> {
        if all.is_empty() {
            return Err(Error::InvalidArgument("no depth metrics to average".into()));
        }
        let n = all.len() as f64;
        let mut acc = [0.0; 7];
        for m in all {
            for (a, v) in acc.iter_mut().zip(m.as_array()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rms, rms_log, delta1, delta2, delta3] = acc.map(|v| v / n);
        Ok(DepthMetrics {
            abs_rel,
            sq_rel,
            rms,
            rms_log,
            delta1,
            delta2,
            delta3,
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores `pred` against `gt` on pixels where `valid` (if given) is
/// positive and the ground truth lies in `[DEPTH_EVAL_MIN, DEPTH_EVAL_MAX]`.
/// With `median_scale`, `pred` is first multiplied by
/// `median(gt) / median(pred)` over those pixels.
pub fn depth_metrics(pred: &ImageGrid, gt: &ImageGrid, valid: Option<&ImageGrid>, median_scale: bool) -> Result<DepthMetrics> {
    if pred.channels() != 1 || !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch("prediction and ground truth must be one-channel maps of one size".into()));
    }
    if let Some(v) = valid {
        if !v.same_extent(gt) {
            return Err(Error::ShapeMismatch("mask does not match the depth maps".into()));
        }
    }
    let mut pairs = Vec::new();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if valid.is_some_and(|v| !(v.data()[i] > 0.0)) || !(DEPTH_EVAL_MIN..=DEPTH_EVAL_MAX).contains(&g) {
            continue;
        }
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!("predicted depth {p} at pixel {i} is not positive")));
        }
        pairs.push((p, g));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no valid pixels to evaluate".into()));
    }
    let s = if median_scale {
        median(pairs.iter().map(|x| x.1).collect()) / median(pairs.iter().map(|x| x.0).collect())
    } else {
        1.0
    };
    let n = pairs.len() as f64;
    let (mut abs_rel, mut sq_rel) = (0.0, 0.0);
    let mut diffs = Vec::with_capacity(pairs.len());
    let mut log_diffs = Vec::with_capacity(pairs.len());
    let mut within = [0usize; 3];
    for &(p, g) in &pairs {
        let p = p * s;
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        diffs.push(d);
        log_diffs.push((p / g).ln());
        let ratio = (p / g).max(g / p);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rms: rms(&diffs),
        rms_log: rms(&log_diffs),
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
    })
}

/// Root mean square, scaled by the largest magnitude so that equal
/// magnitudes come back exactly.
fn rms(v: &[f64]) -> f64 {
    let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if m == 0.0 {
        return 0.0;
    }
    let sum: f64 = v.iter().map(|x| (x / m).powi(2)).sum();
    m * (sum / v.len() as f64).sqrt()
}
