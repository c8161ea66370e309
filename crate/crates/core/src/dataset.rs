//! On-disk dataset: `manifest.toml` plus one point blob and one truth blob
//! per frame. Blobs end in a little-endian CRC32 of everything before it.
//!
//! Point blob: frame index (u32), point count (u64), pose (12 × f64: rotation
//! row-major, then translation), then xyz as f32. Truth blob: frame index
//! (u32), H, W (u32), point count (u64), one class byte per point, one valid
//! byte per cell, then per-cell one-step dx, dy as f64.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, PointFrame, RigidTransform};
use crate::synth::{FrameTruth, LabeledSequence, PointClass, SceneSpec};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;
pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_major: u32,
    format_minor: u32,
    frame_count: usize,
    timestamps: Vec<f64>,
    grid: GridSpec,
    scene: SceneSpec,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_major: u32,
}

fn points_name(k: usize) -> String {
    format!("frame_{k:05}.bin")
}

fn truth_name(k: usize) -> String {
    format!("truth_{k:05}.bin")
}

fn seal(mut buf: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Strips and verifies the CRC trailer.
fn unseal<'a>(buf: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if buf.len() < 4 {
        return Err(Error::Truncated(what.to_string()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checksum(what.to_string()));
    }
    Ok(body)
}

struct Reader<'a> {
    buf: &'a [u8],
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(self.what.to_string()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len())))
        }
    }
}

pub fn encode_points(index: u32, frame: &PointFrame) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 96 + 12 * frame.points.len() + 4);
    buf.extend_from_slice(&index.to_le_bytes());
    buf.extend_from_slice(&(frame.points.len() as u64).to_le_bytes());
    for v in frame.pose.to_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in &frame.points {
        for &c in p {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    seal(buf)
}

/// Returns (frame index, points, pose); the timestamp lives in the manifest.
pub fn decode_points(buf: &[u8], what: &str) -> Result<(u32, Vec<[f64; 3]>, RigidTransform)> {
    let body = unseal(buf, what)?;
    let mut r = Reader { buf: body, what };
    let index = r.u32()?;
    let n = r.u64()? as usize;
    let mut pose = [0.0; 12];
    for v in &mut pose {
        *v = r.f64()?;
    }
    if r.buf.len() < n.saturating_mul(12) {
        return Err(Error::Truncated(what.to_string()));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
    }
    r.finish()?;
    Ok((index, points, RigidTransform::from_array(&pose)))
}

fn encode_truth(index: u32, t: &FrameTruth) -> Vec<u8> {
    let (h, w) = t.valid.dim();
    let mut buf = Vec::new();
    buf.extend_from_slice(&index.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(t.point_class.len() as u64).to_le_bytes());
    buf.extend(t.point_class.iter().map(|&c| c as u8));
    buf.extend(t.valid.iter().map(|&v| u8::from(v)));
    for (dx, dy) in t.step_dx.iter().zip(t.step_dy.iter()) {
        buf.extend_from_slice(&dx.to_le_bytes());
        buf.extend_from_slice(&dy.to_le_bytes());
    }
    seal(buf)
}

fn decode_truth(buf: &[u8], what: &str) -> Result<(u32, FrameTruth)> {
    let body = unseal(buf, what)?;
    let mut r = Reader { buf: body, what };
    let index = r.u32()?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = r.u64()? as usize;
    let point_class = r
        .take(n)?
        .iter()
        .map(|&b| PointClass::from_u8(b).ok_or_else(|| Error::Format(format!("{what}: point class {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let valid = r.take(h * w)?.iter().map(|&b| b != 0).collect::<Vec<_>>();
    let mut dx = Vec::with_capacity(h * w);
    let mut dy = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        dx.push(r.f64()?);
        dy.push(r.f64()?);
    }
    r.finish()?;
    Ok((
        index,
        FrameTruth {
            valid: shape(h, w, valid, what)?,
            step_dx: shape(h, w, dx, what)?,
            step_dy: shape(h, w, dy, what)?,
            point_class,
        },
    ))
}

fn shape<T>(h: usize, w: usize, v: Vec<T>, what: &str) -> Result<Array2<T>> {
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::Format(format!("{what}: {e}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(seq: &LabeledSequence, dir: &Path) -> Result<()> {
    if seq.truth.len() != seq.frames.len() {
        return Err(Error::Shape("truth and frame counts differ".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_major: FORMAT_MAJOR,
        format_minor: FORMAT_MINOR,
        frame_count: seq.frames.len(),
        timestamps: seq.frames.iter().map(|f| f.timestamp).collect(),
        grid: seq.grid,
        scene: seq.scene.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    write_file(&dir.join(MANIFEST_NAME), text.as_bytes())?;
    for (k, (frame, truth)) in seq.frames.iter().zip(&seq.truth).enumerate() {
        write_file(&dir.join(points_name(k)), &encode_points(k as u32, frame))?;
        write_file(&dir.join(truth_name(k)), &encode_truth(k as u32, truth))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<LabeledSequence> {
    let path = dir.join(MANIFEST_NAME);
    let text = String::from_utf8(read_file(&path)?).map_err(|_| Error::Format("manifest: not utf-8".into()))?;
    // Check the version before anything else so older layouts fail cleanly.
    let probe: VersionProbe = toml::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if probe.format_major != FORMAT_MAJOR {
        return Err(Error::Version {
            found: probe.format_major,
            expected: FORMAT_MAJOR,
        });
    }
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if m.timestamps.len() != m.frame_count {
        return Err(Error::Format("manifest: timestamp count differs from frame count".into()));
    }
    m.grid.validate()?;
    let mut frames = Vec::with_capacity(m.frame_count);
    let mut truth = Vec::with_capacity(m.frame_count);
    for k in 0..m.frame_count {
        let name = points_name(k);
        let (index, points, pose) = decode_points(&read_file(&dir.join(&name))?, &name)?;
        let tname = truth_name(k);
        let (tindex, t) = decode_truth(&read_file(&dir.join(&tname))?, &tname)?;
        if index as usize != k || tindex as usize != k {
            return Err(Error::Format(format!("{name}: frame index {index}, expected {k}")));
        }
        if t.point_class.len() != points.len() {
            return Err(Error::Format(format!("{tname}: point count differs from {name}")));
        }
        frames.push(PointFrame::new(points, m.timestamps[k], pose));
        truth.push(t);
    }
    Ok(LabeledSequence {
        grid: m.grid,
        scene: m.scene,
        frames,
        truth,
    })
}

/// Writes several sequences as `seq_000`, `seq_001`, ... under `dir`.
pub fn write_collection(seqs: &[LabeledSequence], dir: &Path) -> Result<()> {
    for (k, s) in seqs.iter().enumerate() {
        write_dataset(s, &dir.join(format!("seq_{k:03}")))?;
    }
    Ok(())
}

/// Reads a single sequence directory or a collection of `seq_*` directories.
pub fn read_collection(dir: &Path) -> Result<Vec<LabeledSequence>> {
    if dir.join(MANIFEST_NAME).exists() {
        return Ok(vec![read_dataset(dir)?]);
    }
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST_NAME).exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::io(dir.join(MANIFEST_NAME), std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    subdirs.iter().map(|p| read_dataset(p)).collect()
}
