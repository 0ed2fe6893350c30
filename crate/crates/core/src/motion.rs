//! Per-pixel translation field `t(x, y) = t0 + m(x, y) · δt(x, y)` with a
//! global rotation `r0`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{so3_exp, ImageGrid, PoseSE3};

#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    /// Global rotation, axis-angle in radians.
    pub r0: Vector3<f64>,
    /// Global translation in meters.
    pub t0: Vector3<f64>,
    /// Residual translation per pixel, three channels, meters.
    pub delta_t: ImageGrid,
    /// Mobile-object gate per pixel in `[0, 1]`.
    pub gate: ImageGrid,
}

impl MotionField {
    /// Pure ego-motion: zero residual and a closed gate.
    pub fn rigid(width: usize, height: usize, r0: Vector3<f64>, t0: Vector3<f64>) -> Self {
        Self {
            r0,
            t0,
            delta_t: ImageGrid::zeros(width, height, 3),
            gate: ImageGrid::zeros(width, height, 1),
        }
    }

    pub fn from_pose(width: usize, height: usize, pose: &PoseSE3) -> Self {
        Self::rigid(
            width,
            height,
            crate::types::so3_log(pose.rotation()),
            *pose.translation(),
        )
    }

    pub fn new(r0: Vector3<f64>, t0: Vector3<f64>, delta_t: ImageGrid, gate: ImageGrid) -> Result<Self> {
        let field = Self {
            r0,
            t0,
            delta_t,
            gate,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_t.channels() != 3 || self.gate.channels() != 1 {
            return Err(Error::ShapeMismatch(
                "motion field needs a 3-channel residual and a 1-channel gate".into(),
            ));
        }
        self.delta_t.expect_extent(&self.gate, "residual vs gate")?;
        if let Some(i) = self
            .gate
            .data()
            .iter()
            .position(|m| !(0.0..=1.0).contains(m))
        {
            return Err(Error::InvalidArgument(format!("gate value outside [0, 1] at pixel {i}")));
        }
        if let Some(index) = self.delta_t.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        if self.r0.iter().chain(self.t0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite global motion".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.gate.width()
    }

    pub fn height(&self) -> usize {
        self.gate.height()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        so3_exp(&self.r0)
    }

    /// The global rigid part `(exp(r0), t0)`.
    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::from_rotation_vector(self.r0, self.t0)
    }

    /// `m(p) · δt(p)` for linear pixel index `p`.
    #[inline]
    pub fn residual_at(&self, p: usize) -> Vector3<f64> {
        let d = self.delta_t.pixel(p);
        Vector3::new(d[0], d[1], d[2]) * self.gate.data()[p]
    }

    /// Full translation `t0 + m(p) · δt(p)`.
    #[inline]
    pub fn translation_at(&self, p: usize) -> Vector3<f64> {
        self.t0 + self.residual_at(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_decomposes() {
        let mut f = MotionField::rigid(2, 1, Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        f.delta_t.pixel_mut(1).copy_from_slice(&[0.0, 2.0, 0.0]);
        f.gate.data_mut()[1] = 0.5;
        assert_eq!(f.translation_at(0), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(f.translation_at(1), Vector3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn gate_range_checked() {
        let mut gate = ImageGrid::zeros(2, 2, 1);
        gate.data_mut()[3] = 1.5;
        let r = MotionField::new(Vector3::zeros(), Vector3::zeros(), ImageGrid::zeros(2, 2, 3), gate);
        assert!(r.is_err());
    }
}
