//! Value types shared by every stage: rasters, pinhole intrinsics, rigid
//! transforms, and timestamped trajectories.
//!
//! Rotations are kept as 3×3 matrices everywhere inside the crate; unit
//! quaternions only appear at the trajectory file boundary.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Row-major raster with interleaved channels.
///
/// The same type holds intensities (normalized to `[0, 1]`), depths in
/// meters, masks, logits and small vector fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} grid needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a grid by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    /// All channels of pixel `p` (linear pixel index).
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_extent(&self, other: &ImageGrid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn expect_extent(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if !self.same_extent(other) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Single channel `c` extracted into a one-channel grid.
    pub fn channel(&self, c: usize) -> ImageGrid {
        ImageGrid::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Sub-rectangle starting at the origin.
    pub fn crop(&self, width: usize, height: usize) -> ImageGrid {
        ImageGrid::from_fn(width, height, self.channels, |x, y, c| self.get(x, y, c))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Position of the first non-finite sample, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

/// Pinhole camera model with pixel-center coordinates at integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Logs a warning when the principal point falls outside a `width × height` image.
    pub fn check_principal_point(&self, width: usize, height: usize) -> bool {
        let inside = self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx <= width as f64 - 1.0
            && self.cy <= height as f64 - 1.0;
        if !inside {
            log::warn!(
                "principal point ({}, {}) lies outside the {}x{} image",
                self.cx,
                self.cy,
                width,
                height
            );
        }
        inside
    }

    /// Intrinsics of an image downsampled 2× by area averaging.
    ///
    /// Coarse pixel `i` covers fine pixels `2i` and `2i + 1`, so its center sits
    /// at fine coordinate `2i + 0.5`.
    pub fn halved(&self) -> Self {
        Self {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx - 0.5) * 0.5,
            cy: (self.cy - 0.5) * 0.5,
        }
    }

    /// Unit-depth ray through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Softplus threshold above which `log(1 + e^l)` is replaced by `l`.
pub const SOFTPLUS_LINEAR_THRESHOLD: f64 = 30.0;

#[inline]
pub fn softplus(l: f64) -> f64 {
    if l > SOFTPLUS_LINEAR_THRESHOLD {
        l
    } else {
        l.exp().ln_1p()
    }
}

/// Derivative of [`softplus`], i.e. the logistic function.
#[inline]
pub fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `z > 0`.
#[inline]
pub fn softplus_inverse(z: f64) -> f64 {
    if z > SOFTPLUS_LINEAR_THRESHOLD {
        z
    } else {
        z.exp_m1().ln()
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Converts unconstrained logits to strictly positive depths.
pub fn depth_from_logits(logits: &ImageGrid) -> Result<ImageGrid> {
    if let Some(index) = logits.first_non_finite() {
        return Err(Error::NonFinite { index });
    }
    Ok(logits.map(softplus))
}

/// Skew-symmetric matrix such that `hat(a) * b == a × b`.
#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

const SMALL_ANGLE: f64 = 1e-8;

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix, with angle in `[0, π]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        // sin(θ)/θ ≈ 1 - θ²/6
        return vee * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // R ≈ 2aaᵀ - I near a half turn; recover the axis from the diagonal.
        let mut axis = Vector3::new(
            ((r[(0, 0)] + 1.0) * 0.5).max(0.0).sqrt(),
            ((r[(1, 1)] + 1.0) * 0.5).max(0.0).sqrt(),
            ((r[(2, 2)] + 1.0) * 0.5).max(0.0).sqrt(),
        );
        let i = axis.imax();
        for j in 0..3 {
            if j != i && r[(i, j)] + r[(j, i)] < 0.0 {
                axis[j] = -axis[j];
            }
        }
        if vee.dot(&axis) < 0.0 {
            axis = -axis;
        }
        return axis.normalize() * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3): `exp(w + δ) ≈ exp(J(w) δ) exp(w)`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(w);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// Projects a near-rotation onto SO(3).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut out = u * v_t;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * v_t;
    }
    out
}

pub fn rotation_drift(r: &Matrix3<f64>) -> f64 {
    let e = r.transpose() * r - Matrix3::identity();
    e.abs().max().max((r.determinant() - 1.0).abs())
}

/// Tangent-space pose parameters: axis-angle rotation and translation part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Twist {
    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let drift = rotation_drift(&rotation);
        if !(drift <= ORTHONORMAL_TOLERANCE) {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (drift {drift:.3e})"
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Accepts any near-rotation and projects it onto SO(3) first.
    pub fn from_parts_projected(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if rotation_drift(&rotation) > ORTHONORMAL_TOLERANCE {
            orthonormalize(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation_vector(w: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&w),
            translation: t,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Self::from_parts_projected(*q.to_rotation_matrix().matrix(), t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    #[inline]
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::from_parts_projected(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Inverse of [`se3_exp`] for rotation angles below π.
    pub fn log(&self) -> Twist {
        let w = so3_log(&self.rotation);
        Twist::new(w, so3_left_jacobian_inverse(&w) * self.translation)
    }

    /// Angle in `[0, π]`, accurate near zero as well.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * vee.norm()).atan2(0.5 * (r.trace() - 1.0))
    }
}

pub fn pose_compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

pub fn pose_inverse(p: &PoseSE3) -> PoseSE3 {
    p.inverse()
}

/// Exponential map of SE(3).
pub fn se3_exp(xi: &Twist) -> PoseSE3 {
    PoseSE3 {
        rotation: so3_exp(&xi.rotation),
        translation: so3_left_jacobian(&xi.rotation) * xi.translation,
    }
}

/// Camera-to-world poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<PoseSE3>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<PoseSE3>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} timestamps for {} poses",
                stamps.len(),
                poses.len()
            )));
        }
        for (i, w) in stamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "timestamps must be strictly increasing (index {}: {} then {})",
                    i + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(Self { stamps, poses })
    }

    /// Poses stamped `0, 1, 2, ...`.
    pub fn from_poses(poses: Vec<PoseSE3>) -> Self {
        let stamps = (0..poses.len()).map(|i| i as f64).collect();
        Self { stamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }

    /// Cumulative path length at every pose, starting from zero.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.poses.len());
        let mut acc = 0.0;
        for (i, p) in self.poses.iter().enumerate() {
            if i > 0 {
                acc += (p.translation() - self.poses[i - 1].translation()).norm();
            }
            out.push(acc);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn random_pose(seed: u64) -> PoseSE3 {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        PoseSE3::from_rotation_vector(w, t)
    }

    fn assert_pose_eq(a: &PoseSE3, b: &PoseSE3, tol: f64) {
        assert!((a.rotation() - b.rotation()).abs().max() <= tol);
        assert!((a.translation() - b.translation()).abs().max() <= tol);
    }

    #[test]
    fn softplus_examples() {
        let g = ImageGrid::from_vec(3, 1, 1, vec![0.0, 50.0, -20.0]).unwrap();
        let z = depth_from_logits(&g).unwrap();
        assert_relative_eq!(z.data()[0], std::f64::consts::LN_2, epsilon = 1e-15);
        assert!((z.data()[1] - 50.0).abs() < 1e-9);
        assert!(z.data()[2] > 0.0);
        assert_relative_eq!(z.data()[2], 2.0611536e-9, max_relative = 1e-6);
    }

    #[test]
    fn softplus_rejects_non_finite() {
        let g = ImageGrid::from_vec(2, 1, 1, vec![0.0, f64::NAN]).unwrap();
        match depth_from_logits(&g) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &z in &[1e-6, 0.3, 1.0, 7.5, 40.0] {
            assert_relative_eq!(softplus(softplus_inverse(z)), z, max_relative = 1e-10);
        }
    }

    #[test]
    fn grid_length_is_checked() {
        assert!(ImageGrid::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageGrid::from_vec(2, 2, 3, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn exp_examples() {
        assert_pose_eq(&se3_exp(&Twist::zero()), &PoseSE3::identity(), 0.0);

        let quarter = se3_exp(&Twist::new(Vector3::new(0.0, 0.0, FRAC_PI_2), Vector3::zeros()));
        let p = quarter.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);

        let shift = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0)));
        assert_eq!(*shift.rotation(), Matrix3::identity());
        assert_eq!(*shift.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn compose_examples() {
        let p = random_pose(1);
        assert_pose_eq(&p.compose(&PoseSE3::identity()), &p, 1e-15);
        assert_pose_eq(&p.compose(&p.inverse()), &PoseSE3::identity(), 1e-9);
        let a = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let b = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(*a.compose(&b).translation(), Vector3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn inverse_examples() {
        assert_pose_eq(&PoseSE3::identity().inverse(), &PoseSE3::identity(), 0.0);
        let p = PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(*p.inverse().translation(), Vector3::new(-1.0, 0.0, 0.0));
        for seed in 0..20 {
            let p = random_pose(seed);
            assert_pose_eq(&pose_compose(&p, &pose_inverse(&p)), &PoseSE3::identity(), 1e-9);
        }
    }

    #[test]
    fn log_near_half_turn() {
        let w = Vector3::new(0.3, -0.5, 0.8).normalize() * (std::f64::consts::PI - 1e-7);
        let back = so3_log(&so3_exp(&w));
        assert!((back - w).norm() < 1e-6);
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 1e-3;
        assert!(PoseSE3::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn trajectory_rejects_non_increasing_stamps() {
        let poses = vec![PoseSE3::identity(); 3];
        assert!(Trajectory::new(vec![0.0, 1.0, 1.0], poses.clone()).is_err());
        assert!(Trajectory::new(vec![0.0, 2.0, 1.0], poses.clone()).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0, 2.0], poses).is_ok());
    }

    #[test]
    fn halved_intrinsics_track_pixel_centers() {
        let k = Intrinsics::new(100.0, 100.0, 31.5, 31.5).unwrap();
        let h = k.halved();
        // A ray through fine pixel 2i + 0.5 is the same as coarse pixel i.
        let fine = k.ray(2.0 * 5.0 + 0.5, 2.0 * 7.0 + 0.5);
        let coarse = h.ray(5.0, 7.0);
        assert!((fine - coarse).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn softplus_positive(l in -50.0f64..50.0) {
            prop_assert!(softplus(l) > 0.0);
        }

        #[test]
        fn exp_log_round_trip(
            wx in -1.0f64..1.0, wy in -1.0f64..1.0, wz in -1.0f64..1.0,
            tx in -3.0f64..3.0, ty in -3.0f64..3.0, tz in -3.0f64..3.0,
            scale in 0.0f64..3.1,
        ) {
            let w = Vector3::new(wx, wy, wz);
            let w = if w.norm() > 0.0 { w.normalize() * scale } else { w };
            let xi = Twist::new(w, Vector3::new(tx, ty, tz));
            let back = se3_exp(&xi).log();
            prop_assert!((back.rotation - xi.rotation).norm() < 1e-6);
            prop_assert!((back.translation - xi.translation).norm() < 1e-6);
        }

        #[test]
        fn compose_associative(a in 0u64..1000, b in 0u64..1000, c in 0u64..1000) {
            let (pa, pb, pc) = (random_pose(a), random_pose(b + 1000), random_pose(c + 2000));
            let left = pa.compose(&pb).compose(&pc);
            let right = pa.compose(&pb.compose(&pc));
            prop_assert!((left.rotation() - right.rotation()).abs().max() < 1e-9);
            prop_assert!((left.translation() - right.translation()).abs().max() < 1e-9);
        }
    }
}
