//! Binary container for generated environment datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          b"fedinv-data v1\n"
//! u32            environment count
//! per environment:
//!   u32          env_id
//!   u32          sample count
//!   u32          feature dimension
//!   u8           target kind: 0 = class, 1 = value
//!   u8           stain mode: 0 = none, 1 = foreground, 2 = background, 3 = both
//!   u8           shape tag: 0 = flat, 1 = image, 2 = plane
//!   u32, u32     shape parameters (rows/cols, plane axes, or zeros)
//!   u32          palette size
//!   f64          spurious correlation
//!   f64          rotation in degrees
//!   labels       one u32 (class) or f64 (value) per sample
//!   features     sample count x dimension f32 values, row-major
//! ```
//!
//! Features are rounded to the nearest `f32` on save, so loading returns
//! values within one `f32` ulp of the originals rather than bit-identical
//! `f64`s. Targets and metadata round-trip exactly.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::data::{EnvDataset, EnvMeta, FeatureShape, StainMode};
use crate::error::{CoreError, Result};
use crate::model::{Sample, Target};

const MAGIC: &[u8] = b"fedinv-data v1\n";

fn stain_code(mode: StainMode) -> u8 {
    match mode {
        StainMode::None => 0,
        StainMode::Foreground => 1,
        StainMode::Background => 2,
        StainMode::Both => 3,
    }
}

fn stain_from_code(code: u8) -> Option<StainMode> {
    match code {
        0 => Some(StainMode::None),
        1 => Some(StainMode::Foreground),
        2 => Some(StainMode::Background),
        3 => Some(StainMode::Both),
        _ => None,
    }
}

fn shape_fields(shape: FeatureShape) -> (u8, u32, u32) {
    match shape {
        FeatureShape::Flat => (0, 0, 0),
        FeatureShape::Image { rows, cols } => (1, rows as u32, cols as u32),
        FeatureShape::Plane { a, b } => (2, a as u32, b as u32),
    }
}

fn shape_from_fields(tag: u8, a: u32, b: u32) -> Option<FeatureShape> {
    match tag {
        0 => Some(FeatureShape::Flat),
        1 => Some(FeatureShape::Image {
            rows: a as usize,
            cols: b as usize,
        }),
        2 => Some(FeatureShape::Plane {
            a: a as usize,
            b: b as usize,
        }),
        _ => None,
    }
}

/// Writes environments to `path` in the container format.
///
/// Every sample in an environment must share one feature dimension and one
/// target kind.
pub fn save_container(path: &Path, envs: &[EnvDataset]) -> Result<()> {
    if envs.is_empty() {
        return Err(CoreError::EmptyDataset("no environments to save".into()));
    }
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(envs.len() as u32).to_le_bytes()).map_err(io_err)?;
    for env in envs {
        let n = env.samples.len();
        let dim = env.samples.first().map_or(0, |s| s.x.len());
        let class_targets = matches!(
            env.samples.first().map(|s| &s.y),
            None | Some(Target::Class(_))
        );
        for s in &env.samples {
            if s.x.len() != dim {
                return Err(CoreError::DimensionMismatch(format!(
                    "environment {} mixes feature dimensions {} and {}",
                    env.env_id,
                    dim,
                    s.x.len()
                )));
            }
            if matches!(s.y, Target::Class(_)) != class_targets {
                return Err(CoreError::Contract(format!(
                    "environment {} mixes class and value targets",
                    env.env_id
                )));
            }
        }
        w.write_all(&(env.env_id as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(n as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&[if class_targets { 0 } else { 1 }]).map_err(io_err)?;
        w.write_all(&[stain_code(env.meta.stain_mode)]).map_err(io_err)?;
        let (tag, sa, sb) = shape_fields(env.shape);
        w.write_all(&[tag]).map_err(io_err)?;
        w.write_all(&sa.to_le_bytes()).map_err(io_err)?;
        w.write_all(&sb.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(env.meta.palette_size as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&env.meta.spurious_corr.to_le_bytes()).map_err(io_err)?;
        w.write_all(&env.meta.rotation_deg.to_le_bytes()).map_err(io_err)?;
        for s in &env.samples {
            match s.y {
                Target::Class(c) => {
                    w.write_all(&(c as u32).to_le_bytes()).map_err(io_err)?
                }
                Target::Value(v) => w.write_all(&v.to_le_bytes()).map_err(io_err)?,
            }
        }
        for s in &env.samples {
            for &v in &s.x {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let slice = &self.buf[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CoreError::format(
                self.path,
                format!("truncated while reading {what} at offset {}", self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Reads a container written by [`save_container`].
pub fn load_container(path: &Path) -> Result<Vec<EnvDataset>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(CoreError::format(path, "not a fedinv-data v1 file"));
    }
    let env_count = r.u32("environment count")?;
    let mut envs = Vec::with_capacity(env_count as usize);
    for _ in 0..env_count {
        let env_id = r.u32("env id")? as usize;
        let n = r.u32("sample count")? as usize;
        let dim = r.u32("feature dimension")? as usize;
        let target_kind = r.u8("target kind")?;
        if target_kind > 1 {
            return Err(CoreError::format(
                path,
                format!("unknown target kind {target_kind} in environment {env_id}"),
            ));
        }
        let stain = r.u8("stain mode")?;
        let stain_mode = stain_from_code(stain).ok_or_else(|| {
            CoreError::format(path, format!("unknown stain mode {stain} in environment {env_id}"))
        })?;
        let tag = r.u8("shape tag")?;
        let sa = r.u32("shape parameter")?;
        let sb = r.u32("shape parameter")?;
        let shape = shape_from_fields(tag, sa, sb).ok_or_else(|| {
            CoreError::format(path, format!("unknown shape tag {tag} in environment {env_id}"))
        })?;
        let palette_size = r.u32("palette size")? as usize;
        let spurious_corr = r.f64("spurious correlation")?;
        let rotation_deg = r.f64("rotation")?;
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            targets.push(if target_kind == 0 {
                Target::Class(r.u32("class label")? as usize)
            } else {
                Target::Value(r.f64("value target")?)
            });
        }
        let mut samples = Vec::with_capacity(n);
        for y in targets {
            let mut x = Vec::with_capacity(dim);
            for _ in 0..dim {
                x.push(r.f32("feature value")? as f64);
            }
            samples.push(Sample { x, y });
        }
        envs.push(EnvDataset {
            env_id,
            samples,
            meta: EnvMeta {
                spurious_corr,
                rotation_deg,
                stain_mode,
                palette_size,
            },
            shape,
        });
    }
    if r.pos != buf.len() {
        return Err(CoreError::format(
            path,
            format!("{} trailing bytes after last environment", buf.len() - r.pos),
        ));
    }
    Ok(envs)
}
