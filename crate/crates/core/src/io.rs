//! File formats: binary PPM/PGM images, PFM float maps, intrinsics,
//! trajectories (timestamped quaternion lines or 3×4 matrix rows) and CSV.
//!
//! Every writer goes through [`write_atomic`], so a reader never sees a
//! half-written file.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::kv::fmt_f64;
use crate::types::{ImageGrid, Intrinsics, PoseSE3, Trajectory};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(Error::from)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pnm_bytes(img: &ImageGrid, magic: &str) -> Vec<u8> {
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

/// Binary PPM (`P6`) of a three-channel image with values in `[0, 1]`.
pub fn ppm_bytes(img: &ImageGrid) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    Ok(pnm_bytes(img, "P6"))
}

/// Binary PGM (`P5`) of a one-channel image with values in `[0, 1]`.
pub fn pgm_bytes(img: &ImageGrid) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!("PGM needs 1 channel, got {}", img.channels())));
    }
    Ok(pnm_bytes(img, "P5"))
}

pub fn write_ppm(path: &Path, img: &ImageGrid) -> Result<()> {
    write_atomic(path, &ppm_bytes(img)?)
}

pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    write_atomic(path, &pgm_bytes(img)?)
}

struct Header {
    /// Token text with the 1-based line it sits on.
    tokens: Vec<(String, usize)>,
    /// Offset just past the single whitespace byte that ends the last token.
    data_offset: usize,
    /// Line on which the binary data starts.
    data_line: usize,
}

impl Header {
    fn text(&self, i: usize) -> &str {
        &self.tokens[i].0
    }

    fn error(&self, i: usize, message: impl Into<String>) -> Error {
        Error::parse(self.tokens[i].1, message)
    }

    fn dim(&self, i: usize, what: &str) -> Result<usize> {
        match self.text(i).parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(self.error(i, format!("bad {what} `{}`", self.text(i)))),
        }
    }
}

/// Splits off whitespace-separated header tokens, skipping `#` comments.
fn header_tokens(bytes: &[u8], count: usize) -> Result<Header> {
    let mut tokens = Vec::with_capacity(count);
    let mut line = 1;
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            if bytes[i] == b'\n' {
                line += 1;
            }
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(line, "truncated header"));
        }
        tokens.push((String::from_utf8_lossy(&bytes[start..i]).into_owned(), line));
    }
    if i >= bytes.len() {
        return Err(Error::parse(line, "header is not followed by data"));
    }
    let data_line = if bytes[i] == b'\n' { line + 1 } else { line };
    Ok(Header {
        tokens,
        data_offset: i + 1,
        data_line,
    })
}

/// Reads binary `P5`/`P6` with 8-bit samples into `[0, 1]`.
pub fn parse_pnm(bytes: &[u8]) -> Result<ImageGrid> {
    let hd = header_tokens(bytes, 4)?;
    let channels = match hd.text(0) {
        "P6" => 3,
        "P5" => 1,
        m => return Err(hd.error(0, format!("unsupported image type `{m}`; need P5 or P6"))),
    };
    let w = hd.dim(1, "width")?;
    let h = hd.dim(2, "height")?;
    if hd.text(3) != "255" {
        return Err(hd.error(3, format!("only 8-bit images are supported (maxval {})", hd.text(3))));
    }
    let n = w * h * channels;
    let body = &bytes[hd.data_offset..];
    if body.len() < n {
        return Err(Error::parse(hd.data_line, format!("expected {n} bytes of pixel data, found {}", body.len())));
    }
    let data = body[..n].iter().map(|&b| b as f64 / 255.0).collect();
    ImageGrid::from_vec(w, h, channels, data)
}

pub fn read_pnm(path: &Path) -> Result<ImageGrid> {
    parse_pnm(&fs::read(path)?)
}

/// PFM, little-endian (scale −1), rows stored bottom to top.  One channel
/// gives `Pf`, three give `PF`; values are stored as `f32`.
pub fn pfm_bytes(img: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidArgument(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(img.get(x, y, ch) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, img: &ImageGrid) -> Result<()> {
    write_atomic(path, &pfm_bytes(img)?)
}

pub fn parse_pfm(bytes: &[u8]) -> Result<ImageGrid> {
    let hd = header_tokens(bytes, 4)?;
    let c = match hd.text(0) {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(hd.error(0, format!("not a PFM file (magic `{m}`)"))),
    };
    let w = hd.dim(1, "width")?;
    let h = hd.dim(2, "height")?;
    let scale: f64 = hd
        .text(3)
        .parse()
        .map_err(|_| hd.error(3, format!("bad PFM scale `{}`", hd.text(3))))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(hd.error(3, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let n = w * h * c;
    let body = &bytes[hd.data_offset..];
    if body.len() < n * 4 {
        return Err(Error::parse(hd.data_line, format!("expected {} bytes of float data, found {}", n * 4, body.len())));
    }
    let mut img = ImageGrid::zeros(w, h, c);
    for (i, chunk) in body[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (i / (w * c), i % (w * c));
        img.set(rest / c, h - 1 - row, rest % c, v as f64);
    }
    Ok(img)
}

pub fn read_pfm(path: &Path) -> Result<ImageGrid> {
    parse_pfm(&fs::read(path)?)
}

fn numbers(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line_no, format!("`{t}` is not a finite number")))
        })
        .collect()
}

/// Lines that carry data: trimmed, non-empty and not `#` comments, with
/// their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// `fx fy cx cy`.
pub fn parse_intrinsics(text: &str) -> Result<Intrinsics> {
    let mut lines = data_lines(text);
    let Some((line_no, line)) = lines.next() else {
        return Err(Error::parse(1, "intrinsics file is empty"));
    };
    let v = numbers(line, line_no)?;
    if v.len() != 4 {
        return Err(Error::parse(line_no, format!("expected `fx fy cx cy`, got {} numbers", v.len())));
    }
    if let Some((l, _)) = lines.next() {
        return Err(Error::parse(l, "unexpected content after the intrinsics"));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(line_no, e.to_string()))
}

pub fn intrinsics_text(k: &Intrinsics) -> String {
    format!("{} {} {} {}\n", fmt_f64(k.fx), fmt_f64(k.fy), fmt_f64(k.cx), fmt_f64(k.cy))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    parse_intrinsics(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// `t tx ty tz qx qy qz qw` per line.
    Tum,
    /// Twelve numbers per line: the row-major top 3×4 of the pose matrix.
    Kitti,
}

impl std::str::FromStr for TrajectoryFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tum" => Ok(Self::Tum),
            "kitti" => Ok(Self::Kitti),
            _ => Err(Error::InvalidArgument(format!("unknown trajectory format `{s}` (tum or kitti)"))),
        }
    }
}

impl TrajectoryFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Tum => "tum",
            Self::Kitti => "kitti",
        }
    }

    /// From the number of fields on the first data line.
    pub fn detect(text: &str) -> Result<Self> {
        let Some((line_no, line)) = data_lines(text).next() else {
            return Err(Error::parse(1, "trajectory file is empty"));
        };
        match line.split_whitespace().count() {
            8 => Ok(Self::Tum),
            12 => Ok(Self::Kitti),
            n => Err(Error::parse(line_no, format!("expected 8 or 12 fields, got {n}"))),
        }
    }
}

pub fn parse_trajectory(text: &str, format: TrajectoryFormat) -> Result<Trajectory> {
    let (mut stamps, mut poses) = (Vec::new(), Vec::new());
    for (line_no, line) in data_lines(text) {
        let v = numbers(line, line_no)?;
        let pose = match format {
            TrajectoryFormat::Tum => {
                if v.len() != 8 {
                    return Err(Error::parse(line_no, format!("expected `t tx ty tz qx qy qz qw`, got {} fields", v.len())));
                }
                let q = Quaternion::new(v[7], v[4], v[5], v[6]);
                if !(q.norm() > 1e-6) {
                    return Err(Error::parse(line_no, "zero quaternion"));
                }
                if stamps.last().is_some_and(|&last| !(v[0] > last)) {
                    return Err(Error::parse(line_no, "timestamps must increase"));
                }
                stamps.push(v[0]);
                PoseSE3::from_quaternion(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3]))
            }
            TrajectoryFormat::Kitti => {
                if v.len() != 12 {
                    return Err(Error::parse(line_no, format!("expected 12 matrix entries, got {}", v.len())));
                }
                let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
                if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-3 {
                    return Err(Error::parse(line_no, "rotation block is not orthonormal"));
                }
                stamps.push(poses.len() as f64);
                PoseSE3::from_parts_projected(r, Vector3::new(v[3], v[7], v[11]))
            }
        };
        poses.push(pose);
    }
    Trajectory::new(stamps, poses)
}

pub fn trajectory_text(traj: &Trajectory, format: TrajectoryFormat) -> String {
    let mut out = String::new();
    for (t, p) in traj.stamps().iter().zip(traj.poses()) {
        let vals: Vec<f64> = match format {
            TrajectoryFormat::Tum => {
                let q = p.quaternion();
                let tr = p.translation();
                vec![*t, tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w]
            }
            TrajectoryFormat::Kitti => {
                let (r, tr) = (p.rotation(), p.translation());
                (0..3).flat_map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)], tr[i]]).collect()
            }
        };
        out.push_str(&crate::kv::fmt_floats(&vals));
        out.push('\n');
    }
    out
}

pub fn read_trajectory(path: &Path, format: Option<TrajectoryFormat>) -> Result<Trajectory> {
    let text = fs::read_to_string(path)?;
    let format = match format {
        Some(f) => f,
        None => TrajectoryFormat::detect(&text)?,
    };
    parse_trajectory(&text, format)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory, format: TrajectoryFormat) -> Result<()> {
    write_atomic(path, trajectory_text(traj, format).as_bytes())
}

/// RFC 4180 table with a header row.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::ShapeMismatch(format!("csv row has {} fields, header {}", r.len(), header.len())));
        }
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}
