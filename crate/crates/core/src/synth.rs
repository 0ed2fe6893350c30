//! Analytic piecewise-planar scenes with exact depth, poses and visibility.
//!
//! Poses are camera-to-world.  Every plane is a bounded rectangle in its own
//! `(s, t)` coordinates around `point` and may translate at a constant
//! velocity per frame; its texture moves with it.

use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project_point, Footprint, Z_MIN};
use crate::kv::{fmt_f64, fmt_floats, KvDoc};
use crate::types::{ImageGrid, Intrinsics, PoseSE3};

pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;
pub const BACKGROUND_COLOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Hard-edged squares of side `size` meters.
    Checker { size: f64 },
    /// Smooth solid lattice noise with cell size `scale` meters, evaluated
    /// at the 3-D surface point so that planes sharing it meet seamlessly.
    ValueNoise { scale: f64, seed: u64, octaves: u32 },
    /// Plane wave of the given wavelength (meters) and direction (degrees).
    Sinusoid { wavelength: f64, angle_deg: f64 },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(i: i64, j: i64, k: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64 ^ splitmix(k as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(p: [f64; 3], seed: u64) -> f64 {
    let cell = p.map(f64::floor);
    let f = [fade(p[0] - cell[0]), fade(p[1] - cell[1]), fade(p[2] - cell[2])];
    let [i, j, k] = cell.map(|c| c as i64);
    let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
    let mut plane = [0.0; 2];
    for (dz, out) in plane.iter_mut().enumerate() {
        let kz = k + dz as i64;
        let top = lerp(lattice(i, j, kz, seed), lattice(i + 1, j, kz, seed), f[0]);
        let bottom = lerp(lattice(i, j + 1, kz, seed), lattice(i + 1, j + 1, kz, seed), f[0]);
        *out = lerp(top, bottom, f[1]);
    }
    lerp(plane[0], plane[1], f[2])
}

impl Texture {
    /// RGB in `[0.1, 0.9]` at plane coordinates `(s, t)`; `rest` is the
    /// surface point with the plane's own motion removed.
    pub fn color(&self, s: f64, t: f64, rest: &Vector3<f64>) -> [f64; 3] {
        match *self {
            Texture::Checker { size } => {
                let parity = ((s / size).floor() as i64 + (t / size).floor() as i64).rem_euclid(2);
                let v = if parity == 0 { 0.2 } else { 0.8 };
                [v, 0.5 * v + 0.25, 1.0 - v]
            }
            Texture::ValueNoise { scale, seed, octaves } => {
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for k in 0..octaves.max(1) {
                        let f = (1u64 << k) as f64 / scale;
                        let amp = 0.5f64.powi(k as i32);
                        let q = [rest.x * f, rest.y * f, rest.z * f];
                        acc += amp * value_noise(q, seed.wrapping_add(101 * c as u64 + 7 * k as u64));
                        norm += amp;
                    }
                    *o = 0.1 + 0.8 * acc / norm;
                }
                out
            }
            Texture::Sinusoid { wavelength, angle_deg } => {
                let a = angle_deg.to_radians();
                let phase = 2.0 * std::f64::consts::PI * (s * a.cos() + t * a.sin()) / wavelength;
                [0.5 + 0.4 * phase.sin(), 0.5 + 0.4 * (phase + 2.1).sin(), 0.5 + 0.4 * (phase + 4.2).sin()]
            }
        }
    }

    fn to_text(self) -> String {
        match self {
            Texture::Checker { size } => format!("checker {}", fmt_f64(size)),
            Texture::ValueNoise { scale, seed, octaves } => format!("noise {} {seed} {octaves}", fmt_f64(scale)),
            Texture::Sinusoid { wavelength, angle_deg } => {
                format!("sine {} {}", fmt_f64(wavelength), fmt_f64(angle_deg))
            }
        }
    }

    fn from_text(v: &str) -> Option<Self> {
        let parts: Vec<&str> = v.split_whitespace().collect();
        match parts.as_slice() {
            ["checker", size] => Some(Texture::Checker { size: size.parse().ok()? }),
            ["noise", scale, seed, octaves] => Some(Texture::ValueNoise {
                scale: scale.parse().ok()?,
                seed: seed.parse().ok()?,
                octaves: octaves.parse().ok()?,
            }),
            ["sine", wl, ang] => Some(Texture::Sinusoid {
                wavelength: wl.parse().ok()?,
                angle_deg: ang.parse().ok()?,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    /// Anchor at frame 0, world coordinates.
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// `[s_min, s_max, t_min, t_max]` around `point`, meters.
    pub extent: [f64; 4],
    pub texture: Texture,
    /// World displacement per frame.
    pub velocity: Vector3<f64>,
}

impl Plane {
    pub fn new(point: Vector3<f64>, normal: Vector3<f64>, extent: [f64; 4], texture: Texture) -> Self {
        Self {
            point,
            normal,
            extent,
            texture,
            velocity: Vector3::zeros(),
        }
    }

    /// In-plane orthonormal axes derived from the normal.
    pub fn basis(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let n = self.normal.normalize();
        let helper = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
        let e1 = helper.cross(&n).normalize();
        let e2 = n.cross(&e1);
        (n, e1, e2)
    }

    pub fn is_moving(&self) -> bool {
        self.velocity != Vector3::zeros()
    }

    fn anchor(&self, frame: f64) -> Vector3<f64> {
        self.point + self.velocity * frame
    }

    /// Ray parameter of the hit and the local coordinates, if inside bounds.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: f64) -> Option<(f64, f64, f64)> {
        let (n, e1, e2) = self.basis();
        let denom = n.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let p0 = self.anchor(frame);
        let lambda = n.dot(&(p0 - origin)) / denom;
        if !(lambda > 0.0) {
            return None;
        }
        let rel = origin + dir * lambda - p0;
        let (s, t) = (e1.dot(&rel), e2.dot(&rel));
        let [s0, s1, t0, t1] = self.extent;
        (s >= s0 && s <= s1 && t >= t0 && t <= t1).then_some((lambda, s, t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub planes: Vec<Plane>,
    pub background_depth: f64,
    /// Camera-to-world pose per frame.
    pub poses: Vec<PoseSE3>,
    /// Subsamples per axis for colors.
    pub supersample: usize,
    /// Seconds between frames (timestamps only).
    pub frame_interval: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub image: ImageGrid,
    pub depth: ImageGrid,
    /// 1 where a plane was hit.
    pub visibility: ImageGrid,
    /// Index of the plane hit at the pixel center, if any.
    pub plane_index: Vec<Option<usize>>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument("scene needs at least 2×2 pixels".into()));
        }
        if self.poses.is_empty() {
            return Err(Error::InvalidArgument("scene has no poses".into()));
        }
        if self.supersample == 0 {
            return Err(Error::InvalidArgument("supersample must be ≥ 1".into()));
        }
        if !(self.background_depth > MIN_DEPTH && self.background_depth < MAX_DEPTH) {
            return Err(Error::InvalidArgument("background depth outside (0.1, 100) m".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !(p.normal.norm() > 0.0) || !p.normal.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("plane {i} has a degenerate normal")));
            }
            let [s0, s1, t0, t1] = p.extent;
            if !(s1 > s0 && t1 > t0) {
                return Err(Error::InvalidArgument(format!("plane {i} has an empty extent")));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.poses.len()).map(|i| i as f64 * self.frame_interval).collect()
    }

    /// Nearest plane hit by the world ray at `frame`: `(plane, λ, s, t)`.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: f64) -> Option<(usize, f64, f64, f64)> {
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for (k, p) in self.planes.iter().enumerate() {
            if let Some((l, s, t)) = p.intersect(origin, dir, frame) {
                if best.is_none_or(|b| l < b.1) {
                    best = Some((k, l, s, t));
                }
            }
        }
        best
    }

    fn camera_ray(&self, frame: usize, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let pose = &self.poses[frame];
        (*pose.translation(), pose.rotation() * self.intrinsics.ray(u, v))
    }
}

pub fn render_scene(spec: &SceneSpec, frame: usize) -> Result<Rendering> {
    spec.validate()?;
    if frame >= spec.poses.len() {
        return Err(Error::InvalidArgument(format!("frame {frame} out of range")));
    }
    let (w, h, ss) = (spec.width, spec.height, spec.supersample);
    let t = frame as f64;
    let rows: Vec<Vec<([f64; 3], f64, Option<usize>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (o, d) = spec.camera_ray(frame, x as f64, y as f64);
                    let center = spec.cast(&o, &d, t);
                    let depth = center.map_or(spec.background_depth, |c| c.1);
                    let mut rgb = [0.0; 3];
                    for sy in 0..ss {
                        for sx in 0..ss {
                            let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                            let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                            let (o, d) = spec.camera_ray(frame, x as f64 + du, y as f64 + dv);
                            let c = match spec.cast(&o, &d, t) {
                                Some((k, l, s, tt)) => {
                                    let rest = o + d * l - spec.planes[k].velocity * t;
                                    spec.planes[k].texture.color(s, tt, &rest)
                                }
                                None => [BACKGROUND_COLOR; 3],
                            };
                            for i in 0..3 {
                                rgb[i] += c[i];
                            }
                        }
                    }
                    let n = (ss * ss) as f64;
                    ([rgb[0] / n, rgb[1] / n, rgb[2] / n], depth, center.map(|c| c.0))
                })
                .collect()
        })
        .collect();
    let mut image = ImageGrid::zeros(w, h, 3);
    let mut depth = ImageGrid::zeros(w, h, 1);
    let mut visibility = ImageGrid::zeros(w, h, 1);
    let mut plane_index = Vec::with_capacity(w * h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (rgb, z, k)) in row.into_iter().enumerate() {
            let p = y * w + x;
            image.pixel_mut(p).copy_from_slice(&rgb);
            if !(z > MIN_DEPTH && z < MAX_DEPTH) {
                return Err(Error::InvalidArgument(format!(
                    "frame {frame}: visible depth {z} at ({x}, {y}) outside (0.1, 100) m"
                )));
            }
            depth.data_mut()[p] = z;
            visibility.data_mut()[p] = k.is_some() as u8 as f64;
            plane_index.push(k);
        }
    }
    Ok(Rendering {
        image,
        depth,
        visibility,
        plane_index,
    })
}

/// Relative pose mapping camera-`i` points into camera `j`, and the exact
/// visibility in frame `j` of every frame-`i` pixel.
pub fn ground_truth_motion(spec: &SceneSpec, i: usize, j: usize) -> Result<(PoseSE3, ImageGrid)> {
    spec.validate()?;
    if i >= spec.poses.len() || j >= spec.poses.len() {
        return Err(Error::InvalidArgument(format!("frames ({i}, {j}) out of range")));
    }
    let pose_ij = spec.poses[j].inverse().compose(&spec.poses[i]);
    let (w, h) = (spec.width, spec.height);
    let inv_j = spec.poses[j].inverse();
    let cam_j = *spec.poses[j].translation();
    let mut mask = ImageGrid::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (o, d) = spec.camera_ray(i, x as f64, y as f64);
            let Some((k, l, _, _)) = spec.cast(&o, &d, i as f64) else {
                continue;
            };
            let world = o + d * l + spec.planes[k].velocity * (j as f64 - i as f64);
            let pc = inv_j.transform_point(&world);
            if pc.z <= Z_MIN {
                continue;
            }
            // Same bounds rule as the bilinear sampler.
            let Some([u, v]) = project_point(&pc, &spec.intrinsics) else {
                continue;
            };
            if Footprint::locate(w, h, u, v).is_none() {
                continue;
            }
            let seg = world - cam_j;
            let blocked = spec.planes.iter().enumerate().any(|(m, p)| {
                m != k && p.intersect(&cam_j, &seg, j as f64).is_some_and(|(lm, _, _)| lm < 1.0 - 1e-9)
            });
            if !blocked {
                mask.set(x, y, 0, 1.0);
            }
        }
    }
    Ok((pose_ij, mask))
}

/// Pixels of `frame` whose visible surface is a moving plane.
pub fn moving_mask(spec: &SceneSpec, frame: usize) -> Result<ImageGrid> {
    let r = render_scene(spec, frame)?;
    let data = r
        .plane_index
        .iter()
        .map(|k| k.is_some_and(|k| spec.planes[k].is_moving()) as u8 as f64)
        .collect();
    ImageGrid::from_vec(spec.width, spec.height, 1, data)
}

/// World-frame displacement between frames `i` and `j` of the surface each
/// frame-`i` pixel sees, expressed in camera `j`.
pub fn true_residual(spec: &SceneSpec, i: usize, j: usize) -> Result<ImageGrid> {
    let r = render_scene(spec, i)?;
    let rot = spec.poses[j].rotation().transpose();
    let mut out = ImageGrid::zeros(spec.width, spec.height, 3);
    for (p, k) in r.plane_index.iter().enumerate() {
        if let Some(k) = k {
            let v = rot * spec.planes[*k].velocity * (j as f64 - i as f64);
            out.pixel_mut(p).copy_from_slice(v.as_slice());
        }
    }
    Ok(out)
}

impl SceneSpec {
    pub fn to_text(&self) -> String {
        let mut doc = KvDoc::new();
        let k = &self.intrinsics;
        doc.set("width", self.width);
        doc.set("height", self.height);
        doc.set("intrinsics", fmt_floats(&[k.fx, k.fy, k.cx, k.cy]));
        doc.set("background_depth", fmt_f64(self.background_depth));
        doc.set("supersample", self.supersample);
        doc.set("frame_interval", fmt_f64(self.frame_interval));
        doc.set("frames", self.poses.len());
        doc.set("planes", self.planes.len());
        for (i, p) in self.poses.iter().enumerate() {
            let q = p.quaternion();
            let t = p.translation();
            doc.set(
                &format!("pose.{i}"),
                fmt_floats(&[t.x, t.y, t.z, q.i, q.j, q.k, q.w]),
            );
        }
        for (i, p) in self.planes.iter().enumerate() {
            doc.set(&format!("plane.{i}.point"), fmt_floats(p.point.as_slice()));
            doc.set(&format!("plane.{i}.normal"), fmt_floats(p.normal.as_slice()));
            doc.set(&format!("plane.{i}.extent"), fmt_floats(&p.extent));
            doc.set(&format!("plane.{i}.texture"), p.texture.to_text());
            doc.set(&format!("plane.{i}.velocity"), fmt_floats(p.velocity.as_slice()));
        }
        doc.serialize()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let frames: usize = doc.require("frames")?;
        let n_planes: usize = doc.require("planes")?;
        let v3 = |key: &str| -> Result<Vector3<f64>> {
            let v = doc
                .floats(key, 3)?
                .ok_or_else(|| Error::InvalidArgument(format!("missing key `{key}`")))?;
            Ok(Vector3::new(v[0], v[1], v[2]))
        };
        let kv = doc
            .floats("intrinsics", 4)?
            .ok_or_else(|| Error::InvalidArgument("missing key `intrinsics`".into()))?;
        let mut poses = Vec::with_capacity(frames);
        for i in 0..frames {
            let key = format!("pose.{i}");
            let v = doc
                .floats(&key, 7)?
                .ok_or_else(|| Error::InvalidArgument(format!("missing key `{key}`")))?;
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]));
            poses.push(PoseSE3::from_quaternion(q, Vector3::new(v[0], v[1], v[2])));
        }
        let mut planes = Vec::with_capacity(n_planes);
        for i in 0..n_planes {
            let ex = doc
                .floats(&format!("plane.{i}.extent"), 4)?
                .ok_or_else(|| Error::InvalidArgument(format!("missing key `plane.{i}.extent`")))?;
            let tex_key = format!("plane.{i}.texture");
            let tex_raw = doc
                .raw(&tex_key)
                .ok_or_else(|| Error::InvalidArgument(format!("missing key `{tex_key}`")))?;
            let texture = Texture::from_text(tex_raw)
                .ok_or_else(|| Error::InvalidArgument(format!("bad texture `{tex_raw}` for `{tex_key}`")))?;
            let velocity = if doc.contains(&format!("plane.{i}.velocity")) {
                v3(&format!("plane.{i}.velocity"))?
            } else {
                Vector3::zeros()
            };
            planes.push(Plane {
                point: v3(&format!("plane.{i}.point"))?,
                normal: v3(&format!("plane.{i}.normal"))?,
                extent: [ex[0], ex[1], ex[2], ex[3]],
                texture,
                velocity,
            });
        }
        doc.reject_unknown(|k| {
            matches!(
                k,
                "width" | "height" | "intrinsics" | "background_depth" | "supersample" | "frame_interval" | "frames" | "planes"
            ) || k.starts_with("pose.")
                || k.starts_with("plane.")
        })?;
        let spec = SceneSpec {
            width: doc.require("width")?,
            height: doc.require("height")?,
            intrinsics: Intrinsics::new(kv[0], kv[1], kv[2], kv[3])?,
            planes,
            background_depth: doc.get_or("background_depth", 50.0)?,
            poses,
            supersample: doc.get_or("supersample", 4)?,
            frame_interval: doc.get_or("frame_interval", 0.1)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Ready-made scenes used by the tests and the CLI.
pub mod presets {
    use super::*;

    fn centered_intrinsics(w: usize, h: usize, f: f64) -> Intrinsics {
        Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).expect("valid intrinsics")
    }

    /// Cell size of the solid texture shared by the static room surfaces.
    pub const ROOM_SCALE: f64 = 2.0;
    /// The corridor's back wall is far away, so it needs coarser cells to
    /// stay below the sampling error budget.
    pub const CORRIDOR_SCALE: f64 = 3.0;

    fn noise(scale: f64, seed: u64) -> Texture {
        Texture::ValueNoise { scale, seed, octaves: 1 }
    }

    /// Camera-to-world poses for a triplet centred on the identity with a
    /// constant per-frame motion `step`.
    pub fn triplet_poses(step: &PoseSE3) -> Vec<PoseSE3> {
        vec![step.inverse(), PoseSE3::identity(), step.clone()]
    }

    /// Closed box: floor, ceiling, side walls and a back wall, seen from
    /// inside.  No surface occludes another.
    pub fn room(back: f64) -> Vec<Plane> {
        let big = [-20.0, 20.0, -20.0, 20.0];
        vec![
            Plane::new(Vector3::new(0.0, 0.0, back), Vector3::new(0.0, 0.0, -1.0), big, noise(ROOM_SCALE, 11)),
            Plane::new(Vector3::new(-1.6, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), big, noise(ROOM_SCALE, 11)),
            Plane::new(Vector3::new(1.6, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), big, noise(ROOM_SCALE, 11)),
            Plane::new(Vector3::new(0.0, 1.1, 0.0), Vector3::new(0.0, -1.0, 0.0), big, noise(ROOM_SCALE, 11)),
            Plane::new(Vector3::new(0.0, -1.1, 0.0), Vector3::new(0.0, 1.0, 0.0), big, noise(ROOM_SCALE, 11)),
        ]
    }

    /// True per-frame motion of the slanted-plane triplet (camera-to-world
    /// step from the target to the next frame).
    pub fn slanted_step() -> PoseSE3 {
        PoseSE3::from_rotation_vector(Vector3::new(0.0, 0.004, 0.0), Vector3::new(0.1, 0.0, 0.05))
    }

    /// Textured slanted walls, floor and ceiling of a room, 3 frames.
    pub fn slanted_planes(w: usize, h: usize) -> SceneSpec {
        SceneSpec {
            width: w,
            height: h,
            intrinsics: centered_intrinsics(w, h, 0.9 * w as f64),
            planes: room(5.0),
            background_depth: 50.0,
            poses: triplet_poses(&slanted_step()),
            supersample: 4,
            frame_interval: 0.1,
        }
    }

    /// The slanted-plane room with one small fronto-parallel panel moving
    /// vertically while the camera moves sideways.
    pub fn moving_plane(w: usize, h: usize) -> SceneSpec {
        let mut spec = slanted_planes(w, h);
        spec.poses = triplet_poses(&PoseSE3::from_translation(Vector3::new(0.1, 0.0, 0.0)));
        let mut panel = Plane::new(
            Vector3::new(0.0, 0.0, 2.5),
            Vector3::new(0.0, 0.0, -1.0),
            [-0.45, 0.45, -0.4, 0.4],
            noise(0.35, 71),
        );
        panel.velocity = Vector3::new(0.0, 0.08, 0.0);
        spec.planes.push(panel);
        spec
    }

    /// Long corridor traversed forward with a slight sway: 7 frames, i.e.
    /// 5 overlapping triplets.
    pub fn corridor(w: usize, h: usize) -> SceneSpec {
        let big = [-40.0, 40.0, -40.0, 40.0];
        let planes = vec![
            Plane::new(Vector3::new(0.0, 0.0, 9.0), Vector3::new(0.0, 0.0, -1.0), big, noise(CORRIDOR_SCALE, 5)),
            Plane::new(Vector3::new(-1.3, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0), big, noise(CORRIDOR_SCALE, 5)),
            Plane::new(Vector3::new(1.3, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), big, noise(CORRIDOR_SCALE, 5)),
            Plane::new(Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, -1.0, 0.0), big, noise(CORRIDOR_SCALE, 5)),
            Plane::new(Vector3::new(0.0, -1.0, 0.0), Vector3::new(0.0, 1.0, 0.0), big, noise(CORRIDOR_SCALE, 5)),
        ];
        let poses = (0..7)
            .map(|i| {
                let f = i as f64;
                PoseSE3::from_rotation_vector(
                    Vector3::new(0.0, 0.01 * (0.9 * f).sin(), 0.0),
                    Vector3::new(0.06 * (0.9 * f).sin(), 0.0, 0.15 * f),
                )
            })
            .collect();
        SceneSpec {
            width: w,
            height: h,
            intrinsics: centered_intrinsics(w, h, 0.9 * w as f64),
            planes,
            background_depth: 50.0,
            poses,
            supersample: 4,
            frame_interval: 0.1,
        }
    }

    /// One fronto-parallel plane filling the view at depth `z`, with a
    /// lateral camera step chosen so that the disparity is `disparity` px.
    pub fn single_plane(w: usize, h: usize, z: f64, disparity: f64) -> SceneSpec {
        let k = centered_intrinsics(w, h, w as f64);
        let tx = disparity * z / k.fx;
        SceneSpec {
            width: w,
            height: h,
            intrinsics: k,
            planes: vec![Plane::new(
                Vector3::new(0.0, 0.0, z),
                Vector3::new(0.0, 0.0, -1.0),
                [-100.0, 100.0, -100.0, 100.0],
                Texture::Sinusoid {
                    wavelength: 0.5 * z,
                    angle_deg: 30.0,
                },
            )],
            background_depth: 50.0,
            poses: triplet_poses(&PoseSE3::from_translation(Vector3::new(tx, 0.0, 0.0))),
            supersample: 4,
            frame_interval: 0.1,
        }
    }

    /// Near panel covering the left part of the view in front of a far wall.
    /// The second camera sits at `x = −tx`, so points shift right by
    /// `fx · tx / z` pixels.  `near_right_edge` is the world `x` where the
    /// near panel ends.
    pub fn two_plane(w: usize, h: usize, fx: f64, near: f64, far: f64, near_right_edge: f64, tx: f64) -> SceneSpec {
        let k = Intrinsics::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).expect("valid intrinsics");
        SceneSpec {
            width: w,
            height: h,
            intrinsics: k,
            planes: vec![
                Plane::new(
                    Vector3::new(0.0, 0.0, near),
                    Vector3::new(0.0, 0.0, -1.0),
                    // In-plane `s` runs along −x for this normal.
                    [-near_right_edge, 100.0, -100.0, 100.0],
                    noise(0.3, 3),
                ),
                Plane::new(
                    Vector3::new(0.0, 0.0, far),
                    Vector3::new(0.0, 0.0, -1.0),
                    [-100.0, 100.0, -100.0, 100.0],
                    noise(0.8, 4),
                ),
            ],
            background_depth: 50.0,
            poses: vec![PoseSE3::identity(), PoseSE3::from_translation(Vector3::new(-tx, 0.0, 0.0))],
            supersample: 4,
            frame_interval: 0.1,
        }
    }
}
