//! Geometric visibility of frame-`a` pixels in frame `b`.
//!
//! A pixel stays visible when at least one depth sample of `b` in the
//! neighborhood of its projection agrees with the depth of the projected
//! point.  Disagreement in either direction (in front of or behind the `b`
//! surface) counts, so a single pass yields a symmetric mask.

use crate::error::{Error, Result};
use crate::geometry::{project_point, Correspondence, Z_MIN};
use crate::motion::MotionField;
use crate::types::{ImageGrid, Intrinsics, PoseSE3};

pub const DEFAULT_NEIGHBORHOOD: f64 = 1.0;
pub const DEFAULT_DEPTH_TOLERANCE: f64 = 0.01;

/// Largest grid the z-buffer oracle accepts per side.
pub const ORACLE_MAX_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    /// 1 = visible, 0 = occluded or out of view; aligned to frame `a`.
    pub mask: ImageGrid,
    pub d_n: f64,
    pub tau_z: f64,
}

impl OcclusionMask {
    pub fn visible_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn all_visible(width: usize, height: usize) -> Self {
        Self {
            mask: ImageGrid::filled(width, height, 1, 1.0),
            d_n: DEFAULT_NEIGHBORHOOD,
            tau_z: DEFAULT_DEPTH_TOLERANCE,
        }
    }
}

/// Normalized depth discrepancy `|a − b| / (a + b)`.
#[inline]
pub fn relative_discrepancy(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a + b)
}

/// Integer positions along one axis within the open radius `d_n` of `x`,
/// plus the nearest one, clipped to `[0, n)`.
fn axis_neighbors(x: f64, d_n: f64, n: usize) -> (usize, usize) {
    let nearest = x.round();
    let lo = ((x - d_n).floor() + 1.0).min(nearest).max(0.0);
    let hi = ((x + d_n).ceil() - 1.0).max(nearest).min(n as f64 - 1.0);
    (lo as usize, hi as usize)
}

fn check_params(d_n: f64, tau_z: f64) -> Result<()> {
    if !(d_n >= 0.0) {
        return Err(Error::InvalidArgument(format!("neighborhood radius must be ≥ 0, got {d_n}")));
    }
    if !(tau_z > 0.0) {
        return Err(Error::InvalidArgument(format!("depth tolerance must be > 0, got {tau_z}")));
    }
    Ok(())
}

pub fn occlusion_mask(
    depth_a: &ImageGrid,
    depth_b: &ImageGrid,
    pose_ab: &PoseSE3,
    k: &Intrinsics,
    d_n: f64,
    tau_z: f64,
) -> Result<OcclusionMask> {
    occlusion_mask_with_motion(depth_a, depth_b, pose_ab, k, None, d_n, tau_z)
}

pub fn occlusion_mask_with_motion(
    depth_a: &ImageGrid,
    depth_b: &ImageGrid,
    pose_ab: &PoseSE3,
    k: &Intrinsics,
    motion: Option<&MotionField>,
    d_n: f64,
    tau_z: f64,
) -> Result<OcclusionMask> {
    check_params(d_n, tau_z)?;
    let corr = Correspondence::from_pose(
        depth_a,
        k,
        pose_ab,
        motion,
        (depth_b.width(), depth_b.height()),
    )?;
    Ok(OcclusionMask {
        mask: mask_from_correspondence(&corr, depth_b, d_n, tau_z),
        d_n,
        tau_z,
    })
}

/// Visibility mask for an already computed correspondence.
pub fn mask_from_correspondence(
    corr: &Correspondence,
    depth_b: &ImageGrid,
    d_n: f64,
    tau_z: f64,
) -> ImageGrid {
    let (wb, hb) = (depth_b.width(), depth_b.height());
    let mut mask = ImageGrid::zeros(corr.width, corr.height, 1);
    for (p, m) in corr.matches.iter().enumerate() {
        if !m.is_valid() {
            continue;
        }
        let z = m.point.z;
        let (x_lo, x_hi) = axis_neighbors(m.coords[0], d_n, wb);
        let (y_lo, y_hi) = axis_neighbors(m.coords[1], d_n, hb);
        let visible = (y_lo..=y_hi).any(|qy| {
            (x_lo..=x_hi).any(|qx| relative_discrepancy(z, depth_b.get(qx, qy, 0)) <= tau_z)
        });
        if visible {
            mask.data_mut()[p] = 1.0;
        }
    }
    mask
}

/// Brute-force reference: forward-splats `depth_a` (supersampled) into a
/// z-buffer on the `b` grid and tests each pixel center against the nearest
/// surface in its cell.
pub fn z_buffer_oracle(
    depth_a: &ImageGrid,
    depth_b: &ImageGrid,
    pose_ab: &PoseSE3,
    k: &Intrinsics,
    supersample: usize,
    tau_z: f64,
) -> Result<OcclusionMask> {
    let (w, h) = (depth_a.width(), depth_a.height());
    let (wb, hb) = (depth_b.width(), depth_b.height());
    if w.max(h).max(wb).max(hb) > ORACLE_MAX_SIDE {
        return Err(Error::InvalidArgument(format!(
            "z-buffer oracle is limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} grids"
        )));
    }
    if supersample < 4 {
        return Err(Error::InvalidArgument(format!(
            "supersampling factor must be ≥ 4, got {supersample}"
        )));
    }
    check_params(0.0, tau_z)?;

    let cell_of = |x: f64, y: f64, z: f64| -> Option<(usize, usize, f64)> {
        let ray = k.ray(x, y) * z;
        let q = pose_ab.transform_point(&ray);
        if q.z <= Z_MIN {
            return None;
        }
        let [u, v] = project_point(&q, k)?;
        let (cu, cv) = (u.round(), v.round());
        if cu < 0.0 || cv < 0.0 || cu > wb as f64 - 1.0 || cv > hb as f64 - 1.0 {
            return None;
        }
        Some((cu as usize, cv as usize, q.z))
    };

    let mut zbuf = vec![f64::INFINITY; wb * hb];
    let s = supersample as f64;
    for y in 0..h {
        for x in 0..w {
            let z = depth_a.get(x, y, 0);
            for j in 0..supersample {
                for i in 0..supersample {
                    let sx = x as f64 + (i as f64 + 0.5) / s - 0.5;
                    let sy = y as f64 + (j as f64 + 0.5) / s - 0.5;
                    if let Some((cu, cv, zq)) = cell_of(sx, sy, z) {
                        let slot = &mut zbuf[cv * wb + cu];
                        if zq < *slot {
                            *slot = zq;
                        }
                    }
                }
            }
        }
    }

    let mut mask = ImageGrid::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            if let Some((cu, cv, zq)) = cell_of(x as f64, y as f64, depth_a.get(x, y, 0)) {
                let nearest = zbuf[cv * wb + cu];
                if nearest.is_finite() && relative_discrepancy(zq, nearest) <= tau_z {
                    mask.set(x, y, 0, 1.0);
                }
            }
        }
    }
    Ok(OcclusionMask {
        mask,
        d_n: 0.0,
        tau_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn two_plane(w: usize, h: usize, split: usize, near: f64, far: f64) -> ImageGrid {
        ImageGrid::from_fn(w, h, 1, |x, _, _| if x < split { near } else { far })
    }

    #[test]
    fn identity_pose_is_fully_visible() {
        let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5).unwrap();
        let d = ImageGrid::from_fn(32, 32, 1, |x, y, _| 3.0 + 0.05 * x as f64 + 0.02 * y as f64);
        let m = occlusion_mask(&d, &d, &PoseSE3::identity(), &k, 1.0, 0.01).unwrap();
        assert_eq!(m.visible_count(), 32 * 32);
        let o = z_buffer_oracle(&d, &d, &PoseSE3::identity(), &k, 4, 0.01).unwrap();
        assert_eq!(o.visible_count(), 32 * 32);
    }

    #[test]
    fn single_plane_lateral_motion_has_no_occlusion() {
        let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5).unwrap();
        let d = ImageGrid::filled(32, 32, 1, 5.0);
        let pose = PoseSE3::from_translation(Vector3::new(0.013, -0.007, 0.0));
        let m = occlusion_mask(&d, &d, &pose, &k, 1.0, 0.01).unwrap();
        for y in 1..31 {
            for x in 1..31 {
                assert_eq!(m.mask.get(x, y, 0), 1.0);
            }
        }
    }

    #[test]
    fn point_behind_occluder_is_hidden() {
        // Far plane everywhere in a, a near patch appears in front of it in b.
        let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5).unwrap();
        let da = ImageGrid::filled(32, 32, 1, 6.0);
        let mut db = ImageGrid::filled(32, 32, 1, 6.0);
        db.set(16, 16, 0, 2.0);
        let o = z_buffer_oracle(&da, &da, &PoseSE3::identity(), &k, 4, 0.01).unwrap();
        assert_eq!(o.mask.get(16, 16, 0), 1.0);
        let m = occlusion_mask(&da, &db, &PoseSE3::identity(), &k, 0.5, 0.01).unwrap();
        assert_eq!(m.mask.get(16, 16, 0), 0.0);
        assert_eq!(m.mask.get(15, 16, 0), 1.0);

        // Oracle: a near pixel in a splats over the far pixel it shadows in b.
        let mut da = ImageGrid::filled(32, 32, 1, 6.0);
        da.set(10, 16, 0, 2.0);
        // X shifts by fx*t/z: 3 px at 2 m, 1 px at 6 m -> near 10 -> 13, far 12 -> 13.
        let pose = PoseSE3::from_translation(Vector3::new(0.2, 0.0, 0.0));
        let o = z_buffer_oracle(&da, &da, &pose, &k, 4, 0.01).unwrap();
        assert_eq!(o.mask.get(12, 16, 0), 0.0);
        assert_eq!(o.mask.get(10, 16, 0), 1.0);
    }

    #[test]
    fn canonical_two_plane_scene_matches_oracle() {
        let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5).unwrap();
        let da = two_plane(32, 32, 16, 2.0, 6.0);
        // Near plane shifts 3 px, far plane 1 px under +0.2 m.
        let db = two_plane(32, 32, 19, 2.0, 6.0);
        let pose = PoseSE3::from_translation(Vector3::new(0.2, 0.0, 0.0));
        let m = occlusion_mask(&da, &db, &pose, &k, 1.0, 0.01).unwrap();
        let o = z_buffer_oracle(&da, &db, &pose, &k, 4, 0.01).unwrap();
        assert_eq!(m.mask, o.mask);
        // Far columns 16 and 17 land under the near plane.
        assert_eq!(m.mask.get(16, 5, 0), 0.0);
        assert_eq!(m.mask.get(17, 5, 0), 0.0);
        assert_eq!(m.mask.get(18, 5, 0), 1.0);
    }

    #[test]
    fn oracle_input_limits() {
        let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5).unwrap();
        let big = ImageGrid::filled(65, 8, 1, 1.0);
        assert!(z_buffer_oracle(&big, &big, &PoseSE3::identity(), &k, 4, 0.01).is_err());
        let small = ImageGrid::filled(8, 8, 1, 1.0);
        assert!(z_buffer_oracle(&small, &small, &PoseSE3::identity(), &k, 2, 0.01).is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        let k = Intrinsics::new(30.0, 30.0, 15.5, 15.5).unwrap();
        let d = ImageGrid::filled(8, 8, 1, 1.0);
        assert!(occlusion_mask(&d, &d, &PoseSE3::identity(), &k, -1.0, 0.01).is_err());
        assert!(occlusion_mask(&d, &d, &PoseSE3::identity(), &k, 1.0, 0.0).is_err());
    }

    #[test]
    fn neighborhood_bounds() {
        assert_eq!(axis_neighbors(5.0, 1.0, 32), (5, 5));
        assert_eq!(axis_neighbors(5.3, 1.0, 32), (5, 6));
        assert_eq!(axis_neighbors(5.3, 0.0, 32), (5, 5));
        assert_eq!(axis_neighbors(5.3, 2.0, 32), (4, 7));
        assert_eq!(axis_neighbors(0.2, 2.0, 32), (0, 2));
        assert_eq!(axis_neighbors(30.8, 2.0, 32), (29, 31));
    }
}
