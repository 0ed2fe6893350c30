use std::path::PathBuf;

use depthvo::config::{ScenePreset, Schedule};
use depthvo::eval::{self, SEGMENT_LENGTHS};
use depthvo::gradcheck::{self, CheckOptions};
use depthvo::losses::{LossOptions, TripletFrames};
use depthvo::occlusion::{self, DEFAULT_DEPTH_TOLERANCE, DEFAULT_NEIGHBORHOOD};
use depthvo::optimizer::{self, Status, TripletProblem};
use depthvo::synth::{self, SceneSpec};
use depthvo::{io, types};
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: depthvo::Error) -> PyErr {
    match e {
        depthvo::Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Row-major `height x width x channels` grid of floats.
#[pyclass(name = "ImageGrid", module = "depthvo", from_py_object)]
#[derive(Clone)]
struct PyImageGrid(types::ImageGrid);

#[pymethods]
impl PyImageGrid {
    #[new]
    #[pyo3(signature = (width, height, channels, data))]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        types::ImageGrid::from_vec(width, height, channels, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (width, height, channels = 1, value = 0.0))]
    fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self(types::ImageGrid::filled(width, height, channels, value))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    #[pyo3(signature = (x, y, c = 0))]
    fn get(&self, x: usize, y: usize, c: usize) -> PyResult<f64> {
        if x >= self.0.width() || y >= self.0.height() || c >= self.0.channels() {
            return Err(PyValueError::new_err(format!("({x}, {y}, {c}) is outside the grid")));
        }
        Ok(self.0.get(x, y, c))
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.data().len()
    }

    fn __repr__(&self) -> String {
        format!("ImageGrid({}x{}x{})", self.0.width(), self.0.height(), self.0.channels())
    }
}

#[pyclass(name = "Intrinsics", module = "depthvo", from_py_object)]
#[derive(Clone)]
struct PyIntrinsics(types::Intrinsics);

#[pymethods]
impl PyIntrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> PyResult<Self> {
        types::Intrinsics::new(fx, fy, cx, cy).map(Self).map_err(to_py)
    }

    #[getter]
    fn fx(&self) -> f64 {
        self.0.fx
    }

    #[getter]
    fn fy(&self) -> f64 {
        self.0.fy
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.0.cx
    }

    #[getter]
    fn cy(&self) -> f64 {
        self.0.cy
    }

    fn __repr__(&self) -> String {
        let k = &self.0;
        format!("Intrinsics(fx={}, fy={}, cx={}, cy={})", k.fx, k.fy, k.cx, k.cy)
    }
}

/// Rigid transform built from an axis-angle rotation and a translation.
#[pyclass(name = "Pose", module = "depthvo", from_py_object)]
#[derive(Clone)]
struct PyPose(types::PoseSE3);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (rotation = [0.0; 3], translation = [0.0; 3]))]
    fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self(types::PoseSE3::from_rotation_vector(Vector3::from(rotation), Vector3::from(translation)))
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(types::PoseSE3::identity())
    }

    /// Exponential of a twist given as rotation and translation parts.
    #[staticmethod]
    fn exp(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self(types::se3_exp(&types::Twist::new(Vector3::from(rotation), Vector3::from(translation))))
    }

    #[staticmethod]
    fn from_matrix(m: [[f64; 4]; 4]) -> PyResult<Self> {
        let r = Matrix3::from_fn(|i, j| m[i][j]);
        let t = Vector3::new(m[0][3], m[1][3], m[2][3]);
        types::PoseSE3::new(r, t).map(Self).map_err(to_py)
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        let (r, t) = (self.0.rotation(), self.0.translation());
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        m
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        (*self.0.translation()).into()
    }

    #[getter]
    fn rotation_vector(&self) -> [f64; 3] {
        types::so3_log(self.0.rotation()).into()
    }

    fn log(&self) -> ([f64; 3], [f64; 3]) {
        let xi = self.0.log();
        (xi.rotation.into(), xi.translation.into())
    }

    fn rotation_angle(&self) -> f64 {
        self.0.rotation_angle()
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(p)).into()
    }

    fn compose(&self, other: &PyPose) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    fn __matmul__(&self, other: &PyPose) -> Self {
        self.compose(other)
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation();
        format!("Pose(angle={:.6}, t=[{:.6}, {:.6}, {:.6}])", self.0.rotation_angle(), t.x, t.y, t.z)
    }
}

#[pyclass(name = "Trajectory", module = "depthvo", from_py_object)]
#[derive(Clone)]
struct PyTrajectory(types::Trajectory);

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (poses, stamps = None))]
    fn new(poses: Vec<PyPose>, stamps: Option<Vec<f64>>) -> PyResult<Self> {
        let poses: Vec<_> = poses.into_iter().map(|p| p.0).collect();
        match stamps {
            Some(s) => types::Trajectory::new(s, poses).map(Self).map_err(to_py),
            None => Ok(Self(types::Trajectory::from_poses(poses))),
        }
    }

    /// Reads a TUM or KITTI file; the format is detected when not given.
    #[staticmethod]
    #[pyo3(signature = (path, format = None))]
    fn read(path: PathBuf, format: Option<&str>) -> PyResult<Self> {
        let format = format.map(trajectory_format).transpose()?;
        io::read_trajectory(&path, format).map(Self).map_err(to_py)
    }

    #[pyo3(signature = (path, format = "tum"))]
    fn write(&self, path: PathBuf, format: &str) -> PyResult<()> {
        io::write_trajectory(&path, &self.0, trajectory_format(format)?).map_err(to_py)
    }

    #[getter]
    fn stamps(&self) -> Vec<f64> {
        self.0.stamps().to_vec()
    }

    #[getter]
    fn poses(&self) -> Vec<PyPose> {
        self.0.poses().iter().cloned().map(PyPose).collect()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.0.positions().into_iter().map(Into::into).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn trajectory_format(s: &str) -> PyResult<io::TrajectoryFormat> {
    match s {
        "tum" => Ok(io::TrajectoryFormat::Tum),
        "kitti" => Ok(io::TrajectoryFormat::Kitti),
        other => Err(PyValueError::new_err(format!("unknown trajectory format `{other}` (tum, kitti)"))),
    }
}

/// A synthetic planar scene with known depth and motion.
#[pyclass(name = "Scene", module = "depthvo")]
struct PyScene(SceneSpec);

#[pymethods]
impl PyScene {
    #[new]
    #[pyo3(signature = (preset = "slanted", width = 64, height = 64))]
    fn new(preset: &str, width: usize, height: usize) -> PyResult<Self> {
        let preset: ScenePreset = preset.parse().map_err(to_py)?;
        let spec = preset.spec(width, height);
        spec.validate().map_err(to_py)?;
        Ok(Self(spec))
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        SceneSpec::from_text(text).map(Self).map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn frame_count(&self) -> usize {
        self.0.frame_count()
    }

    #[getter]
    fn intrinsics(&self) -> PyIntrinsics {
        PyIntrinsics(self.0.intrinsics.clone())
    }

    /// Camera-to-world poses.
    fn trajectory(&self) -> PyTrajectory {
        PyTrajectory(types::Trajectory::new(self.0.timestamps(), self.0.poses.clone()).expect("scene stamps are increasing"))
    }

    /// `(image, depth)` of one frame.
    fn render(&self, frame: usize) -> PyResult<(PyImageGrid, PyImageGrid)> {
        let r = synth::render_scene(&self.0, frame).map_err(to_py)?;
        Ok((PyImageGrid(r.image), PyImageGrid(r.depth)))
    }

    fn moving_mask(&self, frame: usize) -> PyResult<PyImageGrid> {
        synth::moving_mask(&self.0, frame).map(PyImageGrid).map_err(to_py)
    }

    /// Points of frame `i` to frame `j`, with the per-pixel mask of moving pixels.
    fn ground_truth_motion(&self, i: usize, j: usize) -> PyResult<(PyPose, PyImageGrid)> {
        let (p, m) = synth::ground_truth_motion(&self.0, i, j).map_err(to_py)?;
        Ok((PyPose(p), PyImageGrid(m)))
    }
}

#[pyfunction]
fn relative_discrepancy(a: f64, b: f64) -> f64 {
    occlusion::relative_discrepancy(a, b)
}

/// Visibility of frame `a` pixels in frame `b`; 1 is visible.
#[pyfunction]
#[pyo3(signature = (depth_a, depth_b, pose_ab, intrinsics, d_n = DEFAULT_NEIGHBORHOOD, tau_z = DEFAULT_DEPTH_TOLERANCE))]
fn occlusion_mask(
    depth_a: &PyImageGrid,
    depth_b: &PyImageGrid,
    pose_ab: &PyPose,
    intrinsics: &PyIntrinsics,
    d_n: f64,
    tau_z: f64,
) -> PyResult<PyImageGrid> {
    occlusion::occlusion_mask(&depth_a.0, &depth_b.0, &pose_ab.0, &intrinsics.0, d_n, tau_z)
        .map(|m| PyImageGrid(m.mask))
        .map_err(to_py)
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Converged => "converged",
        Status::BudgetExhausted => "budget_exhausted",
        Status::Diverged => "diverged",
    }
}

/// Jointly estimates depth for three frames and the motion between them.
#[pyfunction]
#[pyo3(signature = (images, intrinsics, budget = None, levels = None, schedule = "rigid_first"))]
fn optimize_triplet<'py>(
    py: Python<'py>,
    images: [PyImageGrid; 3],
    intrinsics: &PyIntrinsics,
    budget: Option<usize>,
    levels: Option<usize>,
    schedule: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = schedule.parse::<Schedule>().map_err(to_py)?.base();
    if let Some(b) = budget {
        config.budget = b;
    }
    if let Some(l) = levels {
        config.levels = l;
    }
    let frames = TripletFrames::new(images.map(|g| g.0), intrinsics.0.clone()).map_err(to_py)?;
    let problem = TripletProblem::new(frames, LossOptions::default(), config);
    let sol = py.detach(|| optimizer::optimize_triplet(&problem)).map_err(to_py)?;

    let out = PyDict::new(py);
    out.set_item("status", status_name(sol.status))?;
    out.set_item("iterations", sol.iterations)?;
    out.set_item("initial_loss", sol.initial.total)?;
    out.set_item("final_loss", sol.final_loss.total)?;
    out.set_item("terms", sol.final_loss.terms().to_vec())?;
    out.set_item("depths", sol.depths().into_iter().map(PyImageGrid).collect::<Vec<_>>())?;
    out.set_item("poses", sol.local_poses().into_iter().map(PyPose).collect::<Vec<_>>())?;
    out.set_item("gates", [0, 2].map(|k| PyImageGrid(sol.gate(k))).to_vec())?;
    out.set_item("diagnostic", sol.diagnostic.clone())?;
    Ok(out)
}

/// Similarity `(scale, rotation, translation)` mapping `est` onto `gt`.
#[pyfunction]
fn umeyama_align(est: &PyTrajectory, gt: &PyTrajectory) -> PyResult<(f64, [[f64; 3]; 3], [f64; 3])> {
    let s = eval::umeyama_align(&est.0, &gt.0).map_err(to_py)?;
    let r = s.rotation();
    let rows = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
    Ok((s.scale(), rows, (*s.translation()).into()))
}

#[pyfunction]
fn ate_rmse(est: &PyTrajectory, gt: &PyTrajectory) -> PyResult<f64> {
    let s = eval::umeyama_align(&est.0, &gt.0).map_err(to_py)?;
    eval::ate_rmse(&est.0, &gt.0, &s).map_err(to_py)
}

/// Per-length drift rows: `(length_m, t_err_pct, r_err_deg_per_100m, segments)`.
#[pyfunction]
#[pyo3(signature = (est, gt, lengths = None))]
fn segment_rpe(est: &PyTrajectory, gt: &PyTrajectory, lengths: Option<Vec<f64>>) -> PyResult<Vec<(f64, f64, f64, usize)>> {
    let lengths = lengths.unwrap_or_else(|| SEGMENT_LENGTHS.to_vec());
    let r = eval::segment_rpe(&est.0, &gt.0, &lengths).map_err(to_py)?;
    Ok(r.rows.iter().map(|row| (row.length, row.t_err, row.r_err, row.segments)).collect())
}

#[pyfunction]
#[pyo3(signature = (pred, gt, median_scale = true))]
fn depth_metrics<'py>(py: Python<'py>, pred: &PyImageGrid, gt: &PyImageGrid, median_scale: bool) -> PyResult<Bound<'py, PyDict>> {
    let m = eval::depth_metrics(&pred.0, &gt.0, None, median_scale).map_err(to_py)?;
    let out = PyDict::new(py);
    for (name, v) in eval::DepthMetrics::COLUMNS.iter().zip(m.as_array()) {
        out.set_item(name, v)?;
    }
    Ok(out)
}

/// Finite-difference check of every analytic gradient:
/// `(name, module, max_rel_err, passed)` per check.
#[pyfunction]
#[pyo3(signature = (configurations = 10, seed = 0))]
fn grad_check(py: Python<'_>, configurations: usize, seed: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let opts = CheckOptions {
        seed,
        configurations,
        corrupt: None,
    };
    let reports = py.detach(|| gradcheck::run_all(&opts)).map_err(to_py)?;
    Ok(reports
        .iter()
        .map(|r| (r.name.to_string(), r.module.to_string(), r.max_rel_err, r.passed()))
        .collect())
}

/// Reads a PPM/PGM image or a PFM depth map, by extension.
#[pyfunction]
fn read_grid(path: PathBuf) -> PyResult<PyImageGrid> {
    let pfm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    let grid = if pfm { io::read_pfm(&path) } else { io::read_pnm(&path) };
    grid.map(PyImageGrid).map_err(to_py)
}

/// Writes `.pfm` losslessly; `.ppm`/`.pgm` are quantized to 8 bits.
#[pyfunction]
fn write_grid(path: PathBuf, grid: &PyImageGrid) -> PyResult<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pfm") => io::write_pfm(&path, &grid.0),
        Some("ppm") => io::write_ppm(&path, &grid.0),
        Some("pgm") => io::write_pgm(&path, &grid.0),
        _ => return Err(PyValueError::new_err(format!("{}: expected .pfm, .ppm or .pgm", path.display()))),
    }
    .map_err(to_py)
}

#[pymodule]
#[pyo3(name = "depthvo")]
fn depthvo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImageGrid>()?;
    m.add_class::<PyIntrinsics>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(relative_discrepancy, m)?)?;
    m.add_function(wrap_pyfunction!(occlusion_mask, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(umeyama_align, m)?)?;
    m.add_function(wrap_pyfunction!(ate_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(segment_rpe, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(read_grid, m)?)?;
    m.add_function(wrap_pyfunction!(write_grid, m)?)?;
    m.add("SEGMENT_LENGTHS", SEGMENT_LENGTHS.to_vec())?;
    Ok(())
}
