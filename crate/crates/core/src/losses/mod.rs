//! Loss terms with analytic gradients.
//!
//! Each term returns its value together with the gradient w.r.t. its direct
//! inputs.  [`total_loss`] chains them back onto the free parameters.

mod total;

pub use total::{
    total_loss, total_loss_with_masks, FieldParams, LossBreakdown, LossOptions, LossWeights, PairDiag,
    ParamKind, ParamSet, TripletFrames, DIRECTIONS,
};

use nalgebra::Vector3;

use crate::error::Result;
use crate::geometry::{Correspondence, MotionGrad, WarpResult};
use crate::motion::MotionField;
use crate::occlusion::OcclusionMask;
use crate::types::{so3_left_jacobian, so3_log, ImageGrid};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise product of two single-channel masks.
pub fn combine_masks(a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
    a.expect_extent(b, "mask vs mask")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    ImageGrid::from_vec(a.width(), a.height(), 1, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Photometric {
    pub value: f64,
    /// Number of pixels that contributed.
    pub support: usize,
    pub empty_support: bool,
    /// ∂value/∂warped, same shape as the warped image.
    pub grad_warped: ImageGrid,
}

/// Occlusion-aware mean absolute error between `target` and the warped view.
pub fn photometric_l1(target: &ImageGrid, warp: &WarpResult, occ: &OcclusionMask) -> Result<Photometric> {
    if !target.same_shape(&warp.warped) {
        return Err(crate::Error::ShapeMismatch("target vs warped image".into()));
    }
    let mask = combine_masks(&warp.validity, &occ.mask)?;
    Ok(photometric_masked(target, &warp.warped, &mask))
}

pub(crate) fn photometric_masked(target: &ImageGrid, warped: &ImageGrid, mask: &ImageGrid) -> Photometric {
    let c = target.channels();
    let support = mask.data().iter().filter(|&&m| m > 0.0).count();
    let mut grad = ImageGrid::zeros(target.width(), target.height(), c);
    if support == 0 {
        return Photometric {
            value: 0.0,
            support,
            empty_support: true,
            grad_warped: grad,
        };
    }
    let norm = 1.0 / (support * c) as f64;
    let mut sum = 0.0;
    for (p, &m) in mask.data().iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        for ch in 0..c {
            let i = p * c + ch;
            let d = warped.data()[i] - target.data()[i];
            sum += d.abs();
            grad.data_mut()[i] = sign(d) * norm;
        }
    }
    Photometric {
        value: sum * norm,
        support,
        empty_support: false,
        grad_warped: grad,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// Number of 3×3 windows that contributed.
    pub windows: usize,
    /// ∂value/∂b.
    pub grad_b: ImageGrid,
}

/// Mean of `(1 − SSIM) / 2` over 3×3 windows whose nine pixels are all
/// inside `mask`, averaged over channels.
pub fn ssim_loss(a: &ImageGrid, b: &ImageGrid, mask: &ImageGrid) -> Result<Ssim> {
    if !a.same_shape(b) {
        return Err(crate::Error::ShapeMismatch("ssim inputs".into()));
    }
    a.expect_extent(mask, "ssim mask")?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let mut grad = ImageGrid::zeros(w, h, c);
    if w < 3 || h < 3 {
        return Ok(Ssim {
            value: 0.0,
            windows: 0,
            grad_b: grad,
        });
    }
    let mut centers = Vec::new();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let full = (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| mask.get(xx, yy, 0) > 0.0));
            if full {
                centers.push((x, y));
            }
        }
    }
    if centers.is_empty() {
        return Ok(Ssim {
            value: 0.0,
            windows: 0,
            grad_b: grad,
        });
    }
    let norm = 1.0 / (centers.len() * c) as f64;
    let mut sum = 0.0;
    for &(x, y) in &centers {
        for ch in 0..c {
            let mut va = [0.0; 9];
            let mut vb = [0.0; 9];
            for (k, (xx, yy)) in window(x, y).enumerate() {
                va[k] = a.get(xx, yy, ch);
                vb[k] = b.get(xx, yy, ch);
            }
            let (s, ds) = ssim_window(&va, &vb);
            sum += 0.5 * (1.0 - s);
            for (k, (xx, yy)) in window(x, y).enumerate() {
                let i = b.index(xx, yy, ch);
                grad.data_mut()[i] -= 0.5 * norm * ds[k];
            }
        }
    }
    Ok(Ssim {
        value: sum * norm,
        windows: centers.len(),
        grad_b: grad,
    })
}

fn window(x: usize, y: usize) -> impl Iterator<Item = (usize, usize)> {
    (y - 1..=y + 1).flat_map(move |yy| (x - 1..=x + 1).map(move |xx| (xx, yy)))
}

/// SSIM of two 9-sample windows and its derivative w.r.t. each `b` sample.
fn ssim_window(a: &[f64; 9], b: &[f64; 9]) -> (f64, [f64; 9]) {
    let n = 9.0;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for k in 0..9 {
        let da = a[k] - mu_a;
        let db = b[k] - mu_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let a1 = 2.0 * mu_a * mu_b + SSIM_C1;
    let a2 = 2.0 * cov + SSIM_C2;
    let b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
    let b2 = var_a + var_b + SSIM_C2;
    let num = a1 * a2;
    let den = b1 * b2;
    let s = num / den;
    // Partials of s w.r.t. the window statistics of b.
    let ds_dmu = (2.0 * mu_a * a2 - s * 2.0 * mu_b * b2) / den;
    let ds_dvar = -s * b1 / den;
    let ds_dcov = 2.0 * a1 / den;
    let mut grad = [0.0; 9];
    for k in 0..9 {
        grad[k] = (ds_dmu + ds_dvar * 2.0 * (b[k] - mu_b) + ds_dcov * (a[k] - mu_a)) / n;
    }
    (s, grad)
}

/// Edge weights `e^{−mean_c |∂I|}` for forward differences along x and y.
///
/// `wx` has `(W − 1) · H` entries, `wy` has `W · (H − 1)`.
pub(crate) fn edge_weights(image: &ImageGrid) -> (Vec<f64>, Vec<f64>) {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut wx = Vec::with_capacity(w.saturating_sub(1) * h);
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let g: f64 = (0..c).map(|ch| (image.get(x + 1, y, ch) - image.get(x, y, ch)).abs()).sum();
            wx.push((-g / c as f64).exp());
        }
    }
    let mut wy = Vec::with_capacity(w * h.saturating_sub(1));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let g: f64 = (0..c).map(|ch| (image.get(x, y + 1, ch) - image.get(x, y, ch)).abs()).sum();
            wy.push((-g / c as f64).exp());
        }
    }
    (wx, wy)
}

/// `Σ (w · ∇f)²` over both axes and all channels of `field`; returns the
/// value and ∂value/∂field.
pub(crate) fn weighted_smoothness(field: &ImageGrid, wx: &[f64], wy: &[f64]) -> (f64, ImageGrid) {
    let (w, h, c) = (field.width(), field.height(), field.channels());
    let mut grad = ImageGrid::zeros(w, h, c);
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let e = wx[y * (w - 1) + x];
            for ch in 0..c {
                let d = field.get(x + 1, y, ch) - field.get(x, y, ch);
                sum += (e * d) * (e * d);
                let g = 2.0 * e * e * d;
                grad.data_mut()[field.index(x + 1, y, ch)] += g;
                grad.data_mut()[field.index(x, y, ch)] -= g;
            }
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let e = wy[y * w + x];
            for ch in 0..c {
                let d = field.get(x, y + 1, ch) - field.get(x, y, ch);
                sum += (e * d) * (e * d);
                let g = 2.0 * e * e * d;
                grad.data_mut()[field.index(x, y + 1, ch)] += g;
                grad.data_mut()[field.index(x, y, ch)] -= g;
            }
        }
    }
    (sum, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smoothness {
    pub value: f64,
    pub grad_depth: ImageGrid,
}

/// Edge-aware second-power smoothness of the mean-normalized depth.
pub fn smoothness_loss(depth: &ImageGrid, image: &ImageGrid) -> Result<Smoothness> {
    depth.expect_extent(image, "depth vs image")?;
    let n = depth.pixel_count() as f64;
    let mean = depth.mean();
    if !(mean > 0.0) {
        return Err(crate::Error::InvalidArgument("depth mean must be positive".into()));
    }
    let normalized = depth.map(|d| d / mean);
    let (wx, wy) = edge_weights(image);
    let (value, g_norm) = weighted_smoothness(&normalized, &wx, &wy);
    // n_i = D_i / μ, μ = ΣD / N  ⇒  ∂L/∂D_j = (g_j − Σ_i g_i n_i / N) / μ.
    let coupling: f64 = g_norm
        .data()
        .iter()
        .zip(normalized.data())
        .map(|(g, v)| g * v)
        .sum::<f64>()
        / n;
    let grad_depth = g_norm.map(|g| (g - coupling) / mean);
    Ok(Smoothness { value, grad_depth })
}

/// `|a − b| / (a + b)`.
#[inline]
pub fn depth_discrepancy(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

/// Partials of [`depth_discrepancy`] w.r.t. `a` and `b`.
#[inline]
pub fn depth_discrepancy_grad(a: f64, b: f64) -> (f64, f64) {
    let s = sign(a - b);
    let sum2 = (a + b) * (a + b);
    (2.0 * s * b / sum2, -2.0 * s * a / sum2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleConsistency {
    pub value: f64,
    pub support: usize,
    /// ∂value/∂projected depth, per pixel.
    pub grad_projected: Vec<f64>,
    /// ∂value/∂sampled depth, per pixel.
    pub grad_sampled: Vec<f64>,
}

/// Mean normalized depth discrepancy over valid, visible pixels.
pub fn scale_consistency_loss(
    projected: &ImageGrid,
    sampled: &ImageGrid,
    validity: &ImageGrid,
    occ: &OcclusionMask,
) -> Result<ScaleConsistency> {
    projected.expect_extent(sampled, "projected vs sampled depth")?;
    let mask = combine_masks(validity, &occ.mask)?;
    mask.expect_extent(projected, "mask vs depth")?;
    Ok(scale_consistency_masked(projected.data(), sampled.data(), mask.data()))
}

pub(crate) fn scale_consistency_masked(projected: &[f64], sampled: &[f64], mask: &[f64]) -> ScaleConsistency {
    let n = projected.len();
    let support = mask.iter().filter(|&&m| m > 0.0).count();
    let mut grad_projected = vec![0.0; n];
    let mut grad_sampled = vec![0.0; n];
    if support == 0 {
        return ScaleConsistency {
            value: 0.0,
            support,
            grad_projected,
            grad_sampled,
        };
    }
    let norm = 1.0 / support as f64;
    let mut sum = 0.0;
    for p in 0..n {
        if mask[p] <= 0.0 {
            continue;
        }
        let (a, b) = (projected[p], sampled[p]);
        sum += depth_discrepancy(a, b);
        let (ga, gb) = depth_discrepancy_grad(a, b);
        grad_projected[p] = ga * norm;
        grad_sampled[p] = gb * norm;
    }
    ScaleConsistency {
        value: sum * norm,
        support,
        grad_projected,
        grad_sampled,
    }
}

/// Inputs to the cycle term shared with the rest of the direction's
/// evaluation.
pub struct CycleContext<'a> {
    /// Correspondence of frame `a` into frame `b` under `field_ab`.
    pub corr: &'a Correspondence,
    /// validity · visibility on frame `a`.
    pub mask: &'a ImageGrid,
    /// Weight of the rotation part.
    pub rotation_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub value: f64,
    pub translation_part: f64,
    pub rotation_part: f64,
    pub support: usize,
    pub grad_ab: MotionGrad,
    pub grad_ba: MotionGrad,
    /// ∂value/∂(u, v) of each frame-`a` pixel's match; third slot is zero.
    pub upstream: Vec<[f64; 3]>,
}

/// Forward/backward motion agreement:
/// `mean ‖t_ab(p) + R_ab t_ba(q)‖² + w_rot ‖log(R_ab R_ba)‖²` where `q` is
/// the match of `p` and `t_ba(q)` is bilinearly sampled.
pub fn cycle_consistency_loss(
    field_ab: &MotionField,
    field_ba: &MotionField,
    ctx: &CycleContext<'_>,
) -> Result<Cycle> {
    field_ab.delta_t.expect_extent(ctx.mask, "field vs mask")?;
    let (w, h) = (field_ab.width(), field_ab.height());
    let (wb, hb) = (field_ba.width(), field_ba.height());
    let n = w * h;
    let r_ab = field_ab.rotation();
    let r_ba = field_ba.rotation();
    let j_ab = so3_left_jacobian(&field_ab.r0);
    let j_ba = so3_left_jacobian(&field_ba.r0);

    let mut grad_ab = MotionGrad::zeros(w, h);
    let mut grad_ba = MotionGrad::zeros(wb, hb);
    let mut upstream = vec![[0.0; 3]; n];

    // Per-pixel translation of the backward field, sampled bilinearly.
    let t_ba_img = ImageGrid::from_fn(wb, hb, 3, |x, y, c| field_ba.translation_at(y * wb + x)[c]);

    let support = (0..n)
        .filter(|&p| ctx.mask.data()[p] > 0.0 && ctx.corr.matches[p].is_valid())
        .count();
    let mut trans_sum = 0.0;
    if support > 0 {
        let norm = 1.0 / support as f64;
        let mut rot_acc = Vector3::zeros();
        for p in 0..n {
            if ctx.mask.data()[p] <= 0.0 {
                continue;
            }
            let Some(fp) = ctx.corr.matches[p].footprint else {
                continue;
            };
            let t_ab = field_ab.translation_at(p);
            let t_ba = Vector3::new(fp.sample(&t_ba_img, 0), fp.sample(&t_ba_img, 1), fp.sample(&t_ba_img, 2));
            let rt = r_ab * t_ba;
            let r = t_ab + rt;
            trans_sum += r.norm_squared();
            let g = r * (2.0 * norm);

            grad_ab.t0 += g;
            let m = field_ab.gate.data()[p];
            let d = field_ab.delta_t.pixel(p);
            let gd = grad_ab.delta_t.pixel_mut(p);
            for i in 0..3 {
                gd[i] += m * g[i];
            }
            grad_ab.gate.data_mut()[p] += d[0] * g.x + d[1] * g.y + d[2] * g.z;
            rot_acc += rt.cross(&g);

            let g_tba = r_ab.transpose() * g;
            for (x, y, wt) in fp.weights() {
                if wt == 0.0 {
                    continue;
                }
                let q = y * wb + x;
                grad_ba.t0 += g_tba * wt;
                let mq = field_ba.gate.data()[q];
                let dq = field_ba.delta_t.pixel(q);
                let gq = grad_ba.delta_t.pixel_mut(q);
                for i in 0..3 {
                    gq[i] += wt * mq * g_tba[i];
                }
                grad_ba.gate.data_mut()[q] += wt * (dq[0] * g_tba.x + dq[1] * g_tba.y + dq[2] * g_tba.z);
            }
            let mut du = 0.0;
            let mut dv = 0.0;
            for c in 0..3 {
                let [gu, gv] = fp.gradient(&t_ba_img, c);
                du += g_tba[c] * gu;
                dv += g_tba[c] * gv;
            }
            upstream[p] = [du, dv, 0.0];
        }
        grad_ab.r0 += j_ab.transpose() * rot_acc;
        trans_sum *= norm;
    }

    let phi = so3_log(&(r_ab * r_ba));
    let rotation_part = phi.norm_squared();
    let gphi = phi * (2.0 * ctx.rotation_weight);
    grad_ab.r0 += j_ab.transpose() * gphi;
    grad_ba.r0 += (r_ab * j_ba).transpose() * gphi;

    Ok(Cycle {
        value: trans_sum + ctx.rotation_weight * rotation_part,
        translation_part: trans_sum,
        rotation_part,
        support,
        grad_ab,
        grad_ba,
        upstream,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReg {
    pub value: f64,
    pub grad_delta_t: ImageGrid,
    /// W.r.t. the gate value `m`.
    pub grad_gate: ImageGrid,
}

/// `λ · mean(m ‖δt‖₁) + μ · mean(m)`.
pub fn residual_regularizer(field: &MotionField, lambda: f64, gate_weight: f64) -> ResidualReg {
    let (w, h) = (field.width(), field.height());
    let n = (w * h) as f64;
    let mut grad_delta_t = ImageGrid::zeros(w, h, 3);
    let mut grad_gate = ImageGrid::zeros(w, h, 1);
    let mut sum = 0.0;
    for p in 0..w * h {
        let m = field.gate.data()[p];
        let d = field.delta_t.pixel(p);
        let l1 = d.iter().map(|v| v.abs()).sum::<f64>();
        sum += lambda * m * l1 + gate_weight * m;
        let gd = grad_delta_t.pixel_mut(p);
        for i in 0..3 {
            gd[i] = lambda * m * sign(d[i]) / n;
        }
        grad_gate.data_mut()[p] = (lambda * l1 + gate_weight) / n;
    }
    ResidualReg {
        value: sum / n,
        grad_delta_t,
        grad_gate,
    }
}
