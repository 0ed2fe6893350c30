use nalgebra::Vector3;

use super::{
    combine_masks, cycle_consistency_loss, edge_weights, photometric_masked, residual_regularizer,
    scale_consistency_masked, sign, smoothness_loss, ssim_loss, weighted_smoothness, CycleContext,
};
use crate::error::{Error, Result};
use crate::geometry::{sample_along, Correspondence, MotionGrad};
use crate::motion::MotionField;
use crate::occlusion::{mask_from_correspondence, DEFAULT_DEPTH_TOLERANCE, DEFAULT_NEIGHBORHOOD};
use crate::types::{sigmoid, softplus, ImageGrid, Intrinsics, PoseSE3};

/// Motion directions of a triplet as `(a, b, partner)`: field `k` maps frame
/// `a` into frame `b`, and `partner` is the index of the reverse field.
/// Frames are ordered previous, target, next.
pub const DIRECTIONS: [(usize, usize, usize); 4] = [(1, 0, 1), (0, 1, 0), (1, 2, 3), (2, 1, 2)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub photometric: f64,
    pub ssim: f64,
    pub smoothness: f64,
    pub scale_consistency: f64,
    pub cycle: f64,
    pub residual_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photometric: 1.0,
            ssim: 0.15,
            smoothness: 0.05,
            scale_consistency: 0.5,
            cycle: 0.1,
            residual_reg: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            photometric: 0.0,
            ssim: 0.0,
            smoothness: 0.0,
            scale_consistency: 0.0,
            cycle: 0.0,
            residual_reg: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.photometric,
            self.ssim,
            self.smoothness,
            self.scale_consistency,
            self.cycle,
            self.residual_reg,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        const NAMES: [&str; 6] = ["photometric", "ssim", "smoothness", "scale_consistency", "cycle", "residual_reg"];
        for (name, w) in NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("weight `{name}` must be finite and ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    /// Apply the visibility mask; when off every valid pixel counts.
    pub occlusion: bool,
    pub d_n: f64,
    pub tau_z: f64,
    /// Weight of `‖log(R_ab R_ba)‖²` inside the cycle term.
    pub cycle_rotation_weight: f64,
    /// `λ` of the residual regularizer.
    pub residual_lambda: f64,
    /// Sparsity weight on the gate inside the residual regularizer.
    pub gate_weight: f64,
    /// Weight of an ungated `mean ‖δt‖₁`, added to the residual term.  The
    /// gated penalty alone only sees `m·δt`, so without this the gate can
    /// always shrink while `δt` grows to compensate.
    pub residual_magnitude: f64,
    /// Relative weight of edge-aware smoothness on `δt`, folded into the
    /// smoothness term.
    pub motion_smoothness: f64,
    /// Extra factor on the smoothness term (used per pyramid level).
    pub smoothness_scale: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            occlusion: true,
            d_n: DEFAULT_NEIGHBORHOOD,
            tau_z: DEFAULT_DEPTH_TOLERANCE,
            cycle_rotation_weight: 1.0,
            residual_lambda: 1.0,
            gate_weight: 0.1,
            residual_magnitude: 2.0,
            motion_smoothness: 0.1,
            smoothness_scale: 1.0,
        }
    }
}

impl LossOptions {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, v) in [
            ("cycle_rotation_weight", self.cycle_rotation_weight),
            ("residual_lambda", self.residual_lambda),
            ("gate_weight", self.gate_weight),
            ("residual_magnitude", self.residual_magnitude),
            ("motion_smoothness", self.motion_smoothness),
            ("smoothness_scale", self.smoothness_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("`{name}` must be finite and ≥ 0, got {v}")));
            }
        }
        if self.occlusion && !(self.tau_z > 0.0 && self.d_n >= 0.0) {
            return Err(Error::InvalidArgument("occlusion needs d_n ≥ 0 and tau_z > 0".into()));
        }
        Ok(())
    }
}

/// Images of a triplet (previous, target, next) and the shared intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFrames {
    pub images: [ImageGrid; 3],
    pub intrinsics: Intrinsics,
    /// Depth of a frame as already solved elsewhere in the sequence.  The
    /// scale term also compares the frame's depth against it, which ties
    /// the scale of overlapping triplets together.
    pub anchors: [Option<ImageGrid>; 3],
}

impl TripletFrames {
    pub fn new(images: [ImageGrid; 3], intrinsics: Intrinsics) -> Result<Self> {
        for img in &images[1..] {
            if !img.same_shape(&images[0]) {
                return Err(Error::ShapeMismatch("triplet images differ in shape".into()));
            }
        }
        for (i, img) in images.iter().enumerate() {
            if let Some(j) = img.first_non_finite() {
                return Err(Error::InvalidArgument(format!("frame {i}: non-finite pixel at {j}")));
            }
        }
        Ok(Self {
            images,
            intrinsics,
            anchors: [None, None, None],
        })
    }

    /// Sets the reference depth of `frame`; it must be positive where it
    /// counts, and non-positive entries are ignored.
    pub fn with_anchor(mut self, frame: usize, depth: ImageGrid) -> Result<Self> {
        if frame >= 3 {
            return Err(Error::InvalidArgument(format!("frame {frame} is not part of a triplet")));
        }
        if depth.channels() != 1 || depth.width() != self.width() || depth.height() != self.height() {
            return Err(Error::ShapeMismatch("anchor depth must be one channel at the image size".into()));
        }
        if let Some(j) = depth.first_non_finite() {
            return Err(Error::InvalidArgument(format!("anchor depth: non-finite value at {j}")));
        }
        self.anchors[frame] = Some(depth);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }
}

/// Free parameters of one motion field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub r0: Vector3<f64>,
    pub t0: Vector3<f64>,
    pub delta_t: ImageGrid,
    /// Unconstrained gate; `m = σ(gate_logits)`.
    pub gate_logits: ImageGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    DepthLogit,
    Rotation,
    Translation,
    Residual,
    GateLogit,
}

/// All triplet parameters: three depth-logit maps (depth = softplus) and the
/// four motion fields of [`DIRECTIONS`].  Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub depth_logits: Vec<ImageGrid>,
    pub fields: Vec<FieldParams>,
}

impl ParamSet {
    pub fn zeros(width: usize, height: usize) -> Self {
        let field = FieldParams {
            r0: Vector3::zeros(),
            t0: Vector3::zeros(),
            delta_t: ImageGrid::zeros(width, height, 3),
            gate_logits: ImageGrid::zeros(width, height, 1),
        };
        Self {
            depth_logits: vec![ImageGrid::zeros(width, height, 1); 3],
            fields: vec![field; 4],
        }
    }

    /// Starts from constant depths, the given motions of the `b ← a`
    /// directions and closed gates.
    pub fn from_init(width: usize, height: usize, depth: f64, poses: &[PoseSE3; 4], gate_logit: f64) -> Self {
        let mut p = Self::zeros(width, height);
        let l = crate::types::softplus_inverse(depth);
        for d in &mut p.depth_logits {
            d.data_mut().fill(l);
        }
        for (f, pose) in p.fields.iter_mut().zip(poses) {
            f.r0 = crate::types::so3_log(pose.rotation());
            f.t0 = *pose.translation();
            f.gate_logits.data_mut().fill(gate_logit);
        }
        p
    }

    pub fn width(&self) -> usize {
        self.depth_logits[0].width()
    }

    pub fn height(&self) -> usize {
        self.depth_logits[0].height()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.height())
    }

    pub fn depth(&self, frame: usize) -> ImageGrid {
        self.depth_logits[frame].map(softplus)
    }

    pub fn motion_field(&self, k: usize) -> MotionField {
        let f = &self.fields[k];
        MotionField {
            r0: f.r0,
            t0: f.t0,
            delta_t: f.delta_t.clone(),
            gate: f.gate_logits.map(sigmoid),
        }
    }

    pub fn slices(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out: Vec<(ParamKind, &[f64])> = Vec::with_capacity(19);
        for d in &self.depth_logits {
            out.push((ParamKind::DepthLogit, d.data()));
        }
        for f in &self.fields {
            out.push((ParamKind::Rotation, f.r0.as_slice()));
            out.push((ParamKind::Translation, f.t0.as_slice()));
            out.push((ParamKind::Residual, f.delta_t.data()));
            out.push((ParamKind::GateLogit, f.gate_logits.data()));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::with_capacity(19);
        for d in &mut self.depth_logits {
            out.push((ParamKind::DepthLogit, d.data_mut()));
        }
        for f in &mut self.fields {
            out.push((ParamKind::Rotation, f.r0.as_mut_slice()));
            out.push((ParamKind::Translation, f.t0.as_mut_slice()));
            out.push((ParamKind::Residual, f.delta_t.data_mut()));
            out.push((ParamKind::GateLogit, f.gate_logits.data_mut()));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Overwrites every parameter from a flat vector in [`ParamSet::flatten`]
    /// order.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("expected {} values, got {}", self.len(), values.len())));
        }
        let mut i = 0;
        for (_, s) in self.slices_mut() {
            s.copy_from_slice(&values[i..i + s.len()]);
            i += s.len();
        }
        Ok(())
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.slices()
            .into_iter()
            .enumerate()
            .find(|(_, (_, s))| s.iter().any(|v| !v.is_finite()))
            .map(|(i, (kind, _))| format!("{kind:?}#{i}"))
    }
}

/// Per-direction support counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDiag {
    pub from: usize,
    pub to: usize,
    /// Pixels that land inside the other frame.
    pub valid: usize,
    /// Valid pixels that also pass the visibility test.
    pub visible: usize,
    pub ssim_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub photometric: f64,
    pub ssim: f64,
    pub smoothness: f64,
    pub scale_consistency: f64,
    pub cycle: f64,
    pub residual_reg: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub pairs: Vec<PairDiag>,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.photometric,
            self.ssim,
            self.smoothness,
            self.scale_consistency,
            self.cycle,
            self.residual_reg,
        ]
    }
}

/// Weighted total over all four directions; returns the breakdown and the
/// gradient w.r.t. every parameter.
pub fn total_loss(frames: &TripletFrames, params: &ParamSet, opts: &LossOptions) -> Result<(LossBreakdown, ParamSet)> {
    let (b, g, _) = total_loss_with_masks(frames, params, opts, None)?;
    Ok((b, g))
}

/// Like [`total_loss`], optionally with frozen visibility masks (one per
/// direction).  Also returns the masks that were used.
pub fn total_loss_with_masks(
    frames: &TripletFrames,
    params: &ParamSet,
    opts: &LossOptions,
    masks: Option<&[ImageGrid]>,
) -> Result<(LossBreakdown, ParamSet, Vec<ImageGrid>)> {
    opts.validate()?;
    let (w, h) = (frames.width(), frames.height());
    if params.depth_logits.len() != 3 || params.fields.len() != 4 {
        return Err(Error::ShapeMismatch("parameter set must hold 3 depths and 4 fields".into()));
    }
    for d in &params.depth_logits {
        frames.images[0].expect_extent(d, "image vs depth")?;
    }
    for f in &params.fields {
        f.delta_t.expect_extent(&frames.images[0], "field vs image")?;
        f.gate_logits.expect_extent(&frames.images[0], "gate vs image")?;
    }
    if let Some(m) = masks {
        if m.len() != 4 {
            return Err(Error::ShapeMismatch("need one mask per direction".into()));
        }
    }
    let k = &frames.intrinsics;
    let wt = opts.weights;
    let depths: Vec<ImageGrid> = (0..3).map(|f| params.depth(f)).collect();
    let fields: Vec<MotionField> = (0..4).map(|i| params.motion_field(i)).collect();

    let mut depth_grads: Vec<ImageGrid> = (0..3).map(|_| ImageGrid::zeros(w, h, 1)).collect();
    let mut motion_grads: Vec<MotionGrad> = (0..4).map(|_| MotionGrad::zeros(w, h)).collect();
    let mut used_masks = Vec::with_capacity(4);
    let mut pairs = Vec::with_capacity(4);
    let (mut photometric, mut ssim, mut scale, mut cycle, mut residual) = (0.0, 0.0, 0.0, 0.0, 0.0);

    for (dir, &(a, bf, partner)) in DIRECTIONS.iter().enumerate() {
        let img_a = &frames.images[a];
        let img_b = &frames.images[bf];
        let depth_b = &depths[bf];
        let corr = Correspondence::from_field(&depths[a], k, &fields[dir])?;
        let validity = corr.validity();
        let occ = match masks {
            Some(m) => m[dir].clone(),
            None if opts.occlusion => mask_from_correspondence(&corr, depth_b, opts.d_n, opts.tau_z),
            None => ImageGrid::filled(w, h, 1, 1.0),
        };
        let support = combine_masks(&validity, &occ)?;
        let n = w * h;
        let c = img_b.channels();
        let mut upstream = vec![[0.0f64; 3]; n];

        let (warped, img_grad) = sample_along(img_b, &corr);
        let ph = photometric_masked(img_a, &warped, &support);
        let ss = ssim_loss(img_a, &warped, &support)?;
        photometric += ph.value;
        ssim += ss.value;
        for p in 0..n {
            if support.data()[p] <= 0.0 {
                continue;
            }
            for ch in 0..c {
                let i = p * c + ch;
                let gw = wt.photometric * ph.grad_warped.data()[i] + wt.ssim * ss.grad_b.data()[i];
                upstream[p][0] += gw * img_grad[i][0];
                upstream[p][1] += gw * img_grad[i][1];
            }
        }

        let projected = corr.projected_depth();
        let (sampled, depth_b_grad) = sample_along(depth_b, &corr);
        let sc = scale_consistency_masked(projected.data(), sampled.data(), support.data());
        scale += sc.value;
        if wt.scale_consistency != 0.0 {
            for p in 0..n {
                if support.data()[p] <= 0.0 {
                    continue;
                }
                let gp = wt.scale_consistency * sc.grad_projected[p];
                let gs = wt.scale_consistency * sc.grad_sampled[p];
                upstream[p][2] += gp;
                upstream[p][0] += gs * depth_b_grad[p][0];
                upstream[p][1] += gs * depth_b_grad[p][1];
                let fp = corr.matches[p].footprint.expect("supported pixel has a footprint");
                let gb = depth_grads[bf].data_mut();
                for (x, y, wgt) in fp.weights() {
                    gb[y * w + x] += gs * wgt;
                }
            }
        }

        let cy = cycle_consistency_loss(
            &fields[dir],
            &fields[partner],
            &CycleContext {
                corr: &corr,
                mask: &support,
                rotation_weight: opts.cycle_rotation_weight,
            },
        )?;
        cycle += cy.value;
        if wt.cycle != 0.0 {
            for p in 0..n {
                upstream[p][0] += wt.cycle * cy.upstream[p][0];
                upstream[p][1] += wt.cycle * cy.upstream[p][1];
            }
            motion_grads[dir].add_scaled(&cy.grad_ab, wt.cycle);
            motion_grads[partner].add_scaled(&cy.grad_ba, wt.cycle);
        }

        let rr = residual_regularizer(&fields[dir], opts.residual_lambda, opts.gate_weight);
        residual += rr.value;
        let mu = opts.residual_magnitude;
        if mu != 0.0 {
            let inv_n = 1.0 / n as f64;
            residual += mu * inv_n * fields[dir].delta_t.data().iter().map(|v| v.abs()).sum::<f64>();
        }
        if wt.residual_reg != 0.0 {
            let mg = &mut motion_grads[dir];
            let scale = wt.residual_reg * mu / n as f64;
            for ((g, r), d) in mg
                .delta_t
                .data_mut()
                .iter_mut()
                .zip(rr.grad_delta_t.data())
                .zip(fields[dir].delta_t.data())
            {
                *g += wt.residual_reg * r + scale * sign(*d);
            }
            for (g, r) in mg.gate.data_mut().iter_mut().zip(rr.grad_gate.data()) {
                *g += wt.residual_reg * r;
            }
        }

        corr.backprop(&upstream, &mut depth_grads[a], &mut motion_grads[dir]);

        pairs.push(PairDiag {
            from: a,
            to: bf,
            valid: validity.data().iter().filter(|&&v| v > 0.0).count(),
            visible: ph.support,
            ssim_windows: ss.windows,
        });
        used_masks.push(occ);
    }

    for (f, anchor) in frames.anchors.iter().enumerate() {
        let Some(anchor) = anchor else { continue };
        let valid: Vec<f64> = anchor.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let sc = scale_consistency_masked(depths[f].data(), anchor.data(), &valid);
        scale += sc.value;
        if wt.scale_consistency != 0.0 {
            for (g, v) in depth_grads[f].data_mut().iter_mut().zip(&sc.grad_projected) {
                *g += wt.scale_consistency * v;
            }
        }
    }

    // Smoothness: depth of every frame plus δt of every field, the latter
    // weighted by the edges of the frame the field lives on.  The terms are
    // sums over pixels; dividing by the pixel count puts them on the same
    // footing as the per-pixel means above.
    let per_pixel = 1.0 / (w * h) as f64;
    let s_weight = wt.smoothness * opts.smoothness_scale * per_pixel;
    let mut smooth_raw = 0.0;
    for f in 0..3 {
        let s = smoothness_loss(&depths[f], &frames.images[f])?;
        smooth_raw += s.value;
        if s_weight != 0.0 {
            for (g, v) in depth_grads[f].data_mut().iter_mut().zip(s.grad_depth.data()) {
                *g += s_weight * v;
            }
        }
    }
    if opts.motion_smoothness != 0.0 {
        for (dir, &(a, _, _)) in DIRECTIONS.iter().enumerate() {
            let (wx, wy) = edge_weights(&frames.images[a]);
            let (v, g) = weighted_smoothness(&fields[dir].delta_t, &wx, &wy);
            smooth_raw += opts.motion_smoothness * v;
            if s_weight != 0.0 {
                let s = s_weight * opts.motion_smoothness;
                for (acc, gv) in motion_grads[dir].delta_t.data_mut().iter_mut().zip(g.data()) {
                    *acc += s * gv;
                }
            }
        }
    }
    let smoothness = opts.smoothness_scale * per_pixel * smooth_raw;

    // Chain onto the free parameters.
    let mut grads = params.zeros_like();
    for f in 0..3 {
        let out = grads.depth_logits[f].data_mut();
        for (i, (g, l)) in depth_grads[f].data().iter().zip(params.depth_logits[f].data()).enumerate() {
            out[i] = g * sigmoid(*l);
        }
    }
    for (dir, mg) in motion_grads.into_iter().enumerate() {
        let gf = &mut grads.fields[dir];
        gf.r0 = mg.r0;
        gf.t0 = mg.t0;
        gf.delta_t = mg.delta_t;
        let m = fields[dir].gate.data();
        for (i, out) in gf.gate_logits.data_mut().iter_mut().enumerate() {
            *out = mg.gate.data()[i] * m[i] * (1.0 - m[i]);
        }
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }

    let total = wt.photometric * photometric
        + wt.ssim * ssim
        + wt.smoothness * smoothness
        + wt.scale_consistency * scale
        + wt.cycle * cycle
        + wt.residual_reg * residual;
    let breakdown = LossBreakdown {
        photometric,
        ssim,
        smoothness,
        scale_consistency: scale,
        cycle,
        residual_reg: residual,
        total,
        weights: wt,
        pairs,
    };
    Ok((breakdown, grads, used_masks))
}
