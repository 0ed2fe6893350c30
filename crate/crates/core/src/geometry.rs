//! Pinhole projection and differentiable inverse warping.
//!
//! Warping always samples the source frame at locations computed from the
//! target frame's depth (target → source lookup), so the warped image lives on
//! the target pixel grid.  [`Correspondence`] holds everything needed to push
//! gradients from warped quantities back onto depth and motion parameters.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::motion::MotionField;
use crate::types::{so3_left_jacobian, so3_log, ImageGrid, Intrinsics, PoseSE3};

/// Projected depths at or below this are treated as behind the camera.
pub const Z_MIN: f64 = 1e-6;

/// Slack on the image bounds so that round-off at the last row/column does
/// not flip validity.
const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PointField {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Vector3<f64>>,
}

pub fn backproject(depth: &ImageGrid, k: &Intrinsics) -> PointField {
    let w = depth.width();
    let points = (0..depth.pixel_count())
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            k.ray(x, y) * depth.data()[p * depth.channels()]
        })
        .collect();
    PointField {
        width: w,
        height: depth.height(),
        points,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Continuous pixel coordinates; NaN where `in_front` is false.
    pub coords: Vec<[f64; 2]>,
    pub depths: Vec<f64>,
    pub in_front: Vec<bool>,
}

#[inline]
pub fn project_point(p: &Vector3<f64>, k: &Intrinsics) -> Option<[f64; 2]> {
    if p.z <= Z_MIN {
        return None;
    }
    Some([k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy])
}

pub fn project(points: &PointField, k: &Intrinsics) -> Projection {
    let mut coords = Vec::with_capacity(points.points.len());
    let mut in_front = Vec::with_capacity(points.points.len());
    for p in &points.points {
        match project_point(p, k) {
            Some(c) => {
                coords.push(c);
                in_front.push(true);
            }
            None => {
                coords.push([f64::NAN; 2]);
                in_front.push(false);
            }
        }
    }
    Projection {
        coords,
        depths: points.points.iter().map(|p| p.z).collect(),
        in_front,
    }
}

/// The four-pixel support of a bilinear lookup.
///
/// On an exact lattice line the cell to the left (resp. above) is used, which
/// fixes the one-sided derivative returned there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
}

fn locate_axis(x: f64, n: usize) -> Option<(usize, usize, f64)> {
    let hi = n as f64 - 1.0;
    if !(x >= -BOUNDS_EPS && x <= hi + BOUNDS_EPS) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let x = x.clamp(0.0, hi);
    let x0 = ((x.ceil() as i64) - 1).clamp(0, n as i64 - 2) as usize;
    Some((x0, x0 + 1, x - x0 as f64))
}

impl Footprint {
    pub fn locate(width: usize, height: usize, u: f64, v: f64) -> Option<Self> {
        let (x0, x1, ax) = locate_axis(u, width)?;
        let (y0, y1, ay) = locate_axis(v, height)?;
        Some(Self {
            x0,
            y0,
            x1,
            y1,
            ax,
            ay,
        })
    }

    /// `(x, y, weight)` for the four corners.
    #[inline]
    pub fn weights(&self) -> [(usize, usize, f64); 4] {
        let (ax, ay) = (self.ax, self.ay);
        [
            (self.x0, self.y0, (1.0 - ax) * (1.0 - ay)),
            (self.x1, self.y0, ax * (1.0 - ay)),
            (self.x0, self.y1, (1.0 - ax) * ay),
            (self.x1, self.y1, ax * ay),
        ]
    }

    #[inline]
    pub fn sample(&self, img: &ImageGrid, c: usize) -> f64 {
        let (ax, ay) = (self.ax, self.ay);
        let i00 = img.get(self.x0, self.y0, c);
        let i10 = img.get(self.x1, self.y0, c);
        let i01 = img.get(self.x0, self.y1, c);
        let i11 = img.get(self.x1, self.y1, c);
        (1.0 - ay) * ((1.0 - ax) * i00 + ax * i10) + ay * ((1.0 - ax) * i01 + ax * i11)
    }

    /// `(∂/∂u, ∂/∂v)` of [`Footprint::sample`].
    #[inline]
    pub fn gradient(&self, img: &ImageGrid, c: usize) -> [f64; 2] {
        let (ax, ay) = (self.ax, self.ay);
        let i00 = img.get(self.x0, self.y0, c);
        let i10 = img.get(self.x1, self.y0, c);
        let i01 = img.get(self.x0, self.y1, c);
        let i11 = img.get(self.x1, self.y1, c);
        let du = if self.x0 == self.x1 {
            0.0
        } else {
            (1.0 - ay) * (i10 - i00) + ay * (i11 - i01)
        };
        let dv = if self.y0 == self.y1 {
            0.0
        } else {
            (1.0 - ax) * (i01 - i00) + ax * (i11 - i10)
        };
        [du, dv]
    }
}

/// Distance from `(u, v)` to the nearest bilinear lattice line.
pub fn lattice_distance(u: f64, v: f64) -> f64 {
    let du = (u - u.round()).abs();
    let dv = (v - v.round()).abs();
    du.min(dv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSamples {
    /// `coords.len() × channels` values, zero where invalid.
    pub values: Vec<f64>,
    /// Spatial gradient per value.
    pub gradients: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

pub fn bilinear_sample(img: &ImageGrid, coords: &[[f64; 2]]) -> BilinearSamples {
    let c = img.channels();
    let mut values = vec![0.0; coords.len() * c];
    let mut gradients = vec![[0.0; 2]; coords.len() * c];
    let mut valid = vec![false; coords.len()];
    for (i, &[u, v]) in coords.iter().enumerate() {
        if let Some(fp) = Footprint::locate(img.width(), img.height(), u, v) {
            valid[i] = true;
            for ch in 0..c {
                values[i * c + ch] = fp.sample(img, ch);
                gradients[i * c + ch] = fp.gradient(img, ch);
            }
        }
    }
    BilinearSamples {
        values,
        gradients,
        valid,
    }
}

/// Per-pixel match from frame `a` into frame `b`.
#[derive(Debug, Clone, Copy)]
pub struct PixelMatch {
    /// Point in camera `b`: `R X + t(p)`.
    pub point: Vector3<f64>,
    /// `R X`, before translation.
    pub rotated: Vector3<f64>,
    pub coords: [f64; 2],
    /// Present when the point is in front of camera `b` and lands inside it.
    pub footprint: Option<Footprint>,
}

impl PixelMatch {
    #[inline]
    pub fn is_valid(&self) -> bool {
        self.footprint.is_some()
    }
}

/// Dense correspondence of frame `a` pixels into frame `b`, with the cached
/// factors of its Jacobian.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    /// Left Jacobian of the rotation vector that produced `rotation`.
    pub rotation_jacobian: Matrix3<f64>,
    pub residual: Option<MotionField>,
    pub matches: Vec<PixelMatch>,
    /// `R · ray(p)`: derivative of the transformed point w.r.t. depth.
    pub depth_direction: Vec<Vector3<f64>>,
}

/// Gradients w.r.t. every input of a [`Correspondence`].
#[derive(Debug, Clone, PartialEq)]
pub struct MotionGrad {
    pub r0: Vector3<f64>,
    pub t0: Vector3<f64>,
    pub delta_t: ImageGrid,
    /// W.r.t. the gate value `m`, not its logit.
    pub gate: ImageGrid,
}

impl MotionGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            r0: Vector3::zeros(),
            t0: Vector3::zeros(),
            delta_t: ImageGrid::zeros(width, height, 3),
            gate: ImageGrid::zeros(width, height, 1),
        }
    }

    pub fn add_scaled(&mut self, other: &MotionGrad, s: f64) {
        self.r0 += other.r0 * s;
        self.t0 += other.t0 * s;
        for (a, b) in self.delta_t.data_mut().iter_mut().zip(other.delta_t.data()) {
            *a += s * b;
        }
        for (a, b) in self.gate.data_mut().iter_mut().zip(other.gate.data()) {
            *a += s * b;
        }
    }
}

impl Correspondence {
    /// Correspondence under rigid `pose`, optionally adding the gated residual
    /// translations of `residual` (its own `r0`/`t0` are ignored).
    pub fn from_pose(
        depth_a: &ImageGrid,
        k: &Intrinsics,
        pose: &PoseSE3,
        residual: Option<&MotionField>,
        extent_b: (usize, usize),
    ) -> Result<Self> {
        let r0 = so3_log(pose.rotation());
        Self::build(depth_a, k, *pose.rotation(), r0, *pose.translation(), residual, extent_b)
    }

    /// Correspondence under the full motion field (rotation `exp(r0)`,
    /// translation `t0 + m δt`).
    pub fn from_field(depth_a: &ImageGrid, k: &Intrinsics, field: &MotionField) -> Result<Self> {
        Self::build(
            depth_a,
            k,
            field.rotation(),
            field.r0,
            field.t0,
            Some(field),
            (depth_a.width(), depth_a.height()),
        )
    }

    fn build(
        depth_a: &ImageGrid,
        k: &Intrinsics,
        rotation: Matrix3<f64>,
        r0: Vector3<f64>,
        t0: Vector3<f64>,
        residual: Option<&MotionField>,
        (wb, hb): (usize, usize),
    ) -> Result<Self> {
        if depth_a.channels() != 1 {
            return Err(Error::ShapeMismatch("depth must have one channel".into()));
        }
        if let Some(f) = residual {
            depth_a.expect_extent(&f.gate, "depth vs motion field")?;
        }
        let w = depth_a.width();
        let n = depth_a.pixel_count();
        let mut matches = Vec::with_capacity(n);
        let mut depth_direction = Vec::with_capacity(n);
        for p in 0..n {
            let ray = k.ray((p % w) as f64, (p / w) as f64);
            let dir = rotation * ray;
            let rotated = dir * depth_a.data()[p];
            let t = match residual {
                Some(f) => t0 + f.residual_at(p),
                None => t0,
            };
            let point = rotated + t;
            let (coords, footprint) = match project_point(&point, k) {
                Some(c) => (c, Footprint::locate(wb, hb, c[0], c[1])),
                None => ([f64::NAN; 2], None),
            };
            matches.push(PixelMatch {
                point,
                rotated,
                coords,
                footprint,
            });
            depth_direction.push(dir);
        }
        Ok(Self {
            width: w,
            height: depth_a.height(),
            intrinsics: *k,
            rotation,
            rotation_jacobian: so3_left_jacobian(&r0),
            residual: residual.cloned(),
            matches,
            depth_direction,
        })
    }

    pub fn validity(&self) -> ImageGrid {
        let data = self.matches.iter().map(|m| m.is_valid() as u8 as f64).collect();
        ImageGrid::from_vec(self.width, self.height, 1, data).expect("extent")
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.matches.iter().map(|m| m.coords).collect()
    }

    pub fn projected_depth(&self) -> ImageGrid {
        let data = self
            .matches
            .iter()
            .map(|m| if m.is_valid() { m.point.z } else { 0.0 })
            .collect();
        ImageGrid::from_vec(self.width, self.height, 1, data).expect("extent")
    }

    /// `∂(u, v)/∂Y` at the transformed point.
    #[inline]
    pub fn projection_jacobian(&self, p: usize) -> Matrix2x3<f64> {
        let y = &self.matches[p].point;
        let k = &self.intrinsics;
        let iz = 1.0 / y.z;
        Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * y.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * y.y * iz * iz,
        )
    }

    /// Pulls per-pixel upstream gradients `(∂L/∂u, ∂L/∂v, ∂L/∂z_b)` back onto
    /// the depth of frame `a` and the motion parameters.
    ///
    /// Invalid pixels must carry zero upstream gradient; they are skipped.
    pub fn backprop(
        &self,
        upstream: &[[f64; 3]],
        depth_grad: &mut ImageGrid,
        motion_grad: &mut MotionGrad,
    ) {
        let mut rot_acc = Vector3::zeros();
        for (p, g) in upstream.iter().enumerate() {
            if g == &[0.0; 3] || !self.matches[p].is_valid() {
                continue;
            }
            let j = self.projection_jacobian(p);
            let gy = j.transpose() * nalgebra::Vector2::new(g[0], g[1]) + Vector3::new(0.0, 0.0, g[2]);
            depth_grad.data_mut()[p] += gy.dot(&self.depth_direction[p]);
            rot_acc += self.matches[p].rotated.cross(&gy);
            motion_grad.t0 += gy;
            if let Some(f) = &self.residual {
                let m = f.gate.data()[p];
                let d = f.delta_t.pixel(p);
                let gd = motion_grad.delta_t.pixel_mut(p);
                gd[0] += m * gy.x;
                gd[1] += m * gy.y;
                gd[2] += m * gy.z;
                motion_grad.gate.data_mut()[p] += d[0] * gy.x + d[1] * gy.y + d[2] * gy.z;
            }
        }
        motion_grad.r0 += self.rotation_jacobian.transpose() * rot_acc;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub warped: ImageGrid,
    pub validity: ImageGrid,
    pub coords: Vec<[f64; 2]>,
    pub projected_depth: ImageGrid,
}

/// Samples `source` at the correspondence locations; also returns the spatial
/// image gradient `(∂/∂u, ∂/∂v)` per channel for valid pixels.
pub fn sample_along(source: &ImageGrid, corr: &Correspondence) -> (ImageGrid, Vec<[f64; 2]>) {
    let c = source.channels();
    let mut warped = ImageGrid::zeros(corr.width, corr.height, c);
    let mut grads = vec![[0.0; 2]; corr.matches.len() * c];
    for (p, m) in corr.matches.iter().enumerate() {
        if let Some(fp) = &m.footprint {
            for ch in 0..c {
                warped.data_mut()[p * c + ch] = fp.sample(source, ch);
                grads[p * c + ch] = fp.gradient(source, ch);
            }
        }
    }
    (warped, grads)
}

/// Reconstructs the target view from `source` using the target depth and the
/// target→source transform.
pub fn warp_frame(
    source: &ImageGrid,
    target_depth: &ImageGrid,
    pose_ts: &PoseSE3,
    k: &Intrinsics,
    motion: Option<&MotionField>,
) -> Result<WarpResult> {
    source.expect_extent(target_depth, "source vs target depth")?;
    let corr = Correspondence::from_pose(
        target_depth,
        k,
        pose_ts,
        motion,
        (source.width(), source.height()),
    )?;
    let (warped, _) = sample_along(source, &corr);
    Ok(WarpResult {
        warped,
        validity: corr.validity(),
        coords: corr.coords(),
        projected_depth: corr.projected_depth(),
    })
}

/// Cross-frame depth pair: for every pixel of frame `a`, the depth of its
/// point as seen from camera `b` and the depth `b` itself reports there.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthReprojection {
    pub projected: ImageGrid,
    pub sampled: ImageGrid,
    pub coords: Vec<[f64; 2]>,
    pub validity: ImageGrid,
}

pub fn reproject_depth_pair(
    depth_a: &ImageGrid,
    depth_b: &ImageGrid,
    pose_ab: &PoseSE3,
    k: &Intrinsics,
) -> Result<DepthReprojection> {
    reproject_depth_pair_with_motion(depth_a, depth_b, pose_ab, k, None)
}

pub fn reproject_depth_pair_with_motion(
    depth_a: &ImageGrid,
    depth_b: &ImageGrid,
    pose_ab: &PoseSE3,
    k: &Intrinsics,
    motion: Option<&MotionField>,
) -> Result<DepthReprojection> {
    let corr = Correspondence::from_pose(
        depth_a,
        k,
        pose_ab,
        motion,
        (depth_b.width(), depth_b.height()),
    )?;
    Ok(depth_pair_from(&corr, depth_b))
}

pub fn depth_pair_from(corr: &Correspondence, depth_b: &ImageGrid) -> DepthReprojection {
    let (sampled, _) = sample_along(depth_b, corr);
    DepthReprojection {
        projected: corr.projected_depth(),
        sampled,
        coords: corr.coords(),
        validity: corr.validity(),
    }
}
