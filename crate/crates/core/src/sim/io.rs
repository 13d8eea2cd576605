//! KITTI-style logs: 16-byte point records, 12-number pose lines, and the
//! simulator's per-point label files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::scene::CellClass;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloudFrame, Pose};

const RECORD: usize = 16;

/// Packs a frame as little-endian (x, y, z, intensity) f32 records, intensity 0.
pub fn encode_frame_bin(frame: &PointCloudFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.len() * RECORD);
    for p in &frame.points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses point records; rings come from the nearest entry of `elevations`
/// (radians, ascending). Returns the frame and the number of records dropped
/// for non-finite coordinates.
pub fn decode_frame_bin(
    bytes: &[u8],
    elevations: &[f64],
    frame_id: u64,
    timestamp: f64,
) -> Result<(PointCloudFrame, usize)> {
    if !bytes.len().is_multiple_of(RECORD) {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            message: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(RECORD) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        let p = Point3::new(f(0), f(1), f(2));
        if p.is_finite() {
            points.push(p);
        } else {
            dropped += 1;
        }
    }
    let frame = PointCloudFrame::from_points(&points, elevations, timestamp, frame_id)?;
    Ok((frame, dropped))
}

fn stem_id(path: &Path) -> Option<u64> {
    path.file_stem()?.to_str()?.parse().ok()
}

/// Reads one `.bin` frame; its id is the numeric file stem (0 otherwise).
pub fn read_frame_bin(path: &Path, elevations: &[f64]) -> Result<(PointCloudFrame, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = stem_id(path).unwrap_or(0);
    let (frame, dropped) = decode_frame_bin(&bytes, elevations, id, id as f64 * 0.1)?;
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} non-finite points", path.display());
    }
    Ok((frame, dropped))
}

pub fn write_frame_bin(path: &Path, frame: &PointCloudFrame) -> Result<()> {
    std::fs::write(path, encode_frame_bin(frame)).map_err(|e| Error::io(path, e))
}

/// Parses 3x4 row-major pose lines. Blank lines are skipped.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::ParseLine { line: i + 1, message };
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("not a number: {t:?}"))))
            .collect::<Result<_>>()?;
        let m: [f64; 12] = nums
            .try_into()
            .map_err(|v: Vec<f64>| err(format!("expected 12 numbers, found {}", v.len())))?;
        out.push(Pose::from_matrix34(&m).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_poses(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn format_poses(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let m = p.to_matrix34();
        let line: Vec<String> = m.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    std::fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}

/// One byte per point: 0 road, 1 curb, 2 irrelevant.
pub fn write_labels(path: &Path, labels: &[CellClass]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().map(|c| c.code()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<CellClass>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            CellClass::from_code(b).ok_or_else(|| Error::Parse {
                offset: i as u64,
                message: format!("unknown label {b}"),
            })
        })
        .collect()
}

/// `.bin` files of a directory with numeric stems, sorted by id.
pub fn frame_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(id) = stem_id(&path) {
                out.push((id, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Layout of a simulated or recorded run:
/// `velodyne/NNNNNN.bin`, `labels/NNNNNN.label`, `poses.txt`, `lidar.toml`.
#[derive(Debug, Clone)]
pub struct FrameDir {
    pub root: PathBuf,
}

impl FrameDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FrameDir { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.velodyne(), self.labels()] {
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(())
    }

    pub fn velodyne(&self) -> PathBuf {
        self.root.join("velodyne")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn frame(&self, id: u64) -> PathBuf {
        self.velodyne().join(format!("{id:06}.bin"))
    }

    pub fn label(&self, id: u64) -> PathBuf {
        self.labels().join(format!("{id:06}.label"))
    }

    pub fn poses(&self) -> PathBuf {
        self.root.join("poses.txt")
    }

    /// Beam layout the frames were recorded with.
    pub fn lidar(&self) -> PathBuf {
        self.root.join("lidar.toml")
    }
}
