//! On-disk formats: point clouds, labels, images, calibration, visual
//! proposals, loss weights, checkpoints and error-map PLY files.
//!
//! All binary formats are little-endian.

use std::io::{BufRead, Read, Write};
use std::sync::Arc;

use crate::camera::{CameraImage, Calibration};
use crate::error::{format_err, Error, Result};
use crate::frame::PointCloud;
use crate::panoptic::{ClassRegistry, PanopticLabeling};
use crate::superpoints::Proposal2d;

pub const POINTS_MAGIC: &[u8; 4] = b"PNDA";
pub const POINTS_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNDC";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// `PNDA` point-cloud file: magic, version, N, F, N×3 f32 positions, N×F f32 features.
pub fn write_points(w: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    w.write_all(POINTS_MAGIC)?;
    w.write_all(&POINTS_VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(cloud.channels() as u32).to_le_bytes())?;
    write_f32s(w, cloud.positions().iter().flatten().copied())?;
    write_f32s(w, cloud.features().iter().copied())?;
    Ok(())
}

pub fn read_points(r: &mut impl Read) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != POINTS_MAGIC {
        return Err(format_err("point cloud", "bad magic"));
    }
    let version = read_u32(r)?;
    if version != POINTS_VERSION {
        return Err(format_err("point cloud", format!("unsupported version {version}")));
    }
    let n = read_u32(r)? as usize;
    let f = read_u32(r)? as usize;
    let pos = read_f32s(r, n * 3)?;
    let feats = read_f32s(r, n * f)?;
    let positions = pos
        .chunks_exact(3)
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect();
    PointCloud::new(positions, feats.into_iter().map(f64::from).collect(), f)
}

/// Label file: u32 N followed by N u32 panoptic ids.
pub fn write_labels(w: &mut impl Write, labels: &PanopticLabeling) -> Result<()> {
    w.write_all(&(labels.len() as u32).to_le_bytes())?;
    for &id in labels.ids() {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_labels(r: &mut impl Read, registry: Arc<ClassRegistry>) -> Result<PanopticLabeling> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let ids = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    PanopticLabeling::new(ids, registry)
}

/// Per-point loss weights as one byte each (0 or 1).
pub fn write_weights(w: &mut impl Write, weights: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = weights.iter().map(|&v| u8::from(v > 0.0)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_weights(r: &mut impl Read) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Ok(bytes.into_iter().map(f64::from).collect())
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(w: &mut impl Write, image: &CameraImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(r: &mut impl BufRead) -> Result<CameraImage> {
    let mut tokens = Vec::with_capacity(4);
    let mut token = Vec::new();
    let mut in_comment = false;
    while tokens.len() < 4 {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let c = byte[0];
        if in_comment {
            in_comment = c != b'\n';
            continue;
        }
        if c == b'#' {
            in_comment = true;
        } else if c.is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(c);
        }
    }
    if tokens[0] != "P6" {
        return Err(format_err("ppm", format!("expected P6, found {}", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err("ppm", format!("bad header field {s:?}")))
    };
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(format_err("ppm", "only 8-bit images are supported"));
    }
    let mut buf = vec![0u8; w * h * 3];
    r.read_exact(&mut buf)?;
    CameraImage::new(w, h, buf.into_iter().map(|b| b as f32 / 255.0).collect())
}

const CALIB_KEYS: [&str; 4] = ["fx", "fy", "cx", "cy"];

/// Flat `key=value` calibration text: fx, fy, cx, cy and e00..e33 (row-major extrinsic).
pub fn write_calib(w: &mut impl Write, calib: &Calibration) -> Result<()> {
    let values = [calib.fx(), calib.fy(), calib.cx(), calib.cy()];
    for (k, v) in CALIB_KEYS.iter().zip(values) {
        writeln!(w, "{k}={v}")?;
    }
    for (r, row) in calib.extrinsic().iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            writeln!(w, "e{r}{c}={v}")?;
        }
    }
    Ok(())
}

pub fn read_calib(r: &mut impl BufRead) -> Result<Calibration> {
    let mut intr = [None; 4];
    let mut ext = [[None; 4]; 4];
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_err("calibration", format!("expected key=value, got {line:?}")))?;
        let key = key.trim();
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| format_err("calibration", format!("bad number for {key}")))?;
        if let Some(i) = CALIB_KEYS.iter().position(|k| *k == key) {
            intr[i] = Some(value);
        } else if let Some((r, c)) = parse_extrinsic_key(key) {
            ext[r][c] = Some(value);
        } else {
            return Err(format_err("calibration", format!("unknown key {key}")));
        }
    }
    let missing = || format_err("calibration", "missing entries");
    let mut e = [[0.0; 4]; 4];
    for r in 0..4 {
        for c in 0..4 {
            e[r][c] = ext[r][c].ok_or_else(missing)?;
        }
    }
    let [fx, fy, cx, cy] = intr;
    Calibration::new(
        e,
        fx.ok_or_else(missing)?,
        fy.ok_or_else(missing)?,
        cx.ok_or_else(missing)?,
        cy.ok_or_else(missing)?,
    )
}

fn parse_extrinsic_key(key: &str) -> Option<(usize, usize)> {
    let b = key.as_bytes();
    if b.len() == 3 && b[0] == b'e' && (b'0'..b'4').contains(&b[1]) && (b'0'..b'4').contains(&b[2]) {
        Some(((b[1] - b'0') as usize, (b[2] - b'0') as usize))
    } else {
        None
    }
}

/// Visual proposals: u32 count, u32 width, u32 height, then per proposal
/// u32 label, f32 confidence, u32 run count and the run lengths. Runs cover
/// the row-major mask alternating outside/inside, starting outside.
pub fn write_proposals(
    w: &mut impl Write,
    width: usize,
    height: usize,
    proposals: &[Proposal2d],
) -> Result<()> {
    w.write_all(&(proposals.len() as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())?;
    for p in proposals {
        if p.mask.len() != width * height {
            return Err(Error::Shape("proposal mask does not match image size".into()));
        }
        w.write_all(&p.label.to_le_bytes())?;
        w.write_all(&(p.confidence as f32).to_le_bytes())?;
        let runs = encode_runs(&p.mask);
        w.write_all(&(runs.len() as u32).to_le_bytes())?;
        for run in runs {
            w.write_all(&run.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_proposals(r: &mut impl Read) -> Result<(usize, usize, Vec<Proposal2d>)> {
    let count = read_u32(r)? as usize;
    let width = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = read_u32(r)?;
        let confidence = read_f32s(r, 1)?[0] as f64;
        let n_runs = read_u32(r)? as usize;
        let mut mask = Vec::with_capacity(width * height);
        let mut inside = false;
        for _ in 0..n_runs {
            let len = read_u32(r)? as usize;
            if mask.len() + len > width * height {
                return Err(format_err("proposals", "runs overflow the mask"));
            }
            mask.extend(std::iter::repeat_n(inside, len));
            inside = !inside;
        }
        if mask.len() != width * height {
            return Err(format_err("proposals", "runs do not cover the mask"));
        }
        out.push(Proposal2d {
            mask,
            label,
            confidence,
        });
    }
    Ok((width, height, out))
}

fn encode_runs(mask: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

/// Student and teacher parameters plus the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
    pub iteration: u64,
}

/// `PNDC` checkpoint: magic, u32 parameter count, f32 student, f32 teacher, u64 iteration.
pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.student.len() != ckpt.teacher.len() {
        return Err(Error::Shape("student and teacher sizes differ".into()));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(ckpt.student.len() as u32).to_le_bytes())?;
    write_f32s(w, ckpt.student.iter().copied())?;
    write_f32s(w, ckpt.teacher.iter().copied())?;
    w.write_all(&ckpt.iteration.to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err("checkpoint", "bad magic"));
    }
    let n = read_u32(r)? as usize;
    let student = read_f32s(r, n)?.into_iter().map(f64::from).collect();
    let teacher = read_f32s(r, n)?.into_iter().map(f64::from).collect();
    let iteration = read_u64(r)?;
    Ok(Checkpoint {
        student,
        teacher,
        iteration,
    })
}

/// ASCII PLY with per-vertex position and 8-bit color.
pub fn write_colored_ply(w: &mut impl Write, positions: &[[f64; 3]], colors: &[[u8; 3]]) -> Result<()> {
    if positions.len() != colors.len() {
        return Err(Error::Shape("one color per point required".into()));
    }
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", positions.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property float {axis}")?;
    }
    for channel in ["red", "green", "blue"] {
        writeln!(w, "property uchar {channel}")?;
    }
    writeln!(w, "end_header")?;
    for (p, c) in positions.iter().zip(colors) {
        writeln!(
            w,
            "{} {} {} {} {} {}",
            p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]
        )?;
    }
    Ok(())
}

/// Vertex positions and colors from an ASCII PLY written by [`write_colored_ply`].
pub fn read_colored_ply(r: &mut impl BufRead) -> Result<Vec<([f32; 3], [u8; 3])>> {
    let mut lines = r.lines();
    let mut count = None;
    for line in lines.by_ref() {
        let line = line?;
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = n.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| format_err("ply", "missing vertex count"))?;
    let mut out = Vec::with_capacity(count);
    for line in lines.take(count) {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format_err("ply", format!("bad vertex line {line:?}")));
        }
        let num = |s: &str| s.parse::<f32>().map_err(|_| format_err("ply", "bad coordinate"));
        let byte = |s: &str| s.parse::<u8>().map_err(|_| format_err("ply", "bad color"));
        out.push((
            [num(f[0])?, num(f[1])?, num(f[2])?],
            [byte(f[3])?, byte(f[4])?, byte(f[5])?],
        ));
    }
    if out.len() != count {
        return Err(format_err("ply", "truncated vertex list"));
    }
    Ok(out)
}
