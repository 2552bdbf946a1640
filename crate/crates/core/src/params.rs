//! Flat parameter vectors and the text checkpoint format.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::Arch;

/// A flat, finite `f64` parameter vector.
///
/// The entry order for each architecture is fixed and documented on
/// [`Arch`]: layers in forward order, each layer's weight matrix
/// (row-major) followed by its bias vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    /// Wraps a vector after checking every entry is finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(CoreError::Contract(format!(
                "parameter {i} is not finite ({})",
                values[i]
            ))),
            None => Ok(ParamVec(values)),
        }
    }

    /// Wraps values produced by internal arithmetic without re-checking.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ParamVec(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVec(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVec) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ParamVec) -> ParamVec {
        debug_assert_eq!(self.len(), other.len());
        ParamVec(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &ParamVec) -> ParamVec {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, c: f64) -> ParamVec {
        ParamVec(self.0.iter().map(|a| a * c).collect())
    }

    pub fn distance(&self, other: &ParamVec) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<ParamVec> for Vec<f64> {
    fn from(p: ParamVec) -> Vec<f64> {
        p.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const CHECKPOINT_MAGIC: &str = "fedinv-params";
const CHECKPOINT_VERSION: &str = "v1";

/// Serializes a checkpoint: a `fedinv-params v1 <arch-tag> <d_model>` header
/// line followed by one decimal value per line.
///
/// Values are printed in the shortest decimal form that round-trips, so a
/// save/load cycle reproduces the vector bit for bit.
pub fn checkpoint_string(arch: &Arch, params: &ParamVec) -> String {
    let mut out = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {} {}\n",
        arch.tag(),
        params.len()
    );
    for v in params.iter() {
        out.push_str(&format!("{v}\n"));
    }
    out
}

/// Writes a checkpoint to `path` (via a temp file renamed into place).
pub fn save_checkpoint(path: &Path, arch: &Arch, params: &ParamVec) -> Result<()> {
    if params.len() != arch.d_model() {
        return Err(CoreError::DimensionMismatch(format!(
            "checkpoint for {} needs {} parameters, got {}",
            arch.tag(),
            arch.d_model(),
            params.len()
        )));
    }
    let text = checkpoint_string(arch, params);
    crate::eval::write_atomic(path, text.as_bytes())
}

/// Reads a checkpoint, returning the architecture recovered from the header
/// tag and the parameter vector.
pub fn load_checkpoint(path: &Path) -> Result<(Arch, ParamVec)> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::format(path, "empty checkpoint"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 4 || fields[0] != CHECKPOINT_MAGIC || fields[1] != CHECKPOINT_VERSION {
        return Err(CoreError::format(
            path,
            format!("bad header {header:?}, expected `{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} <arch-tag> <d_model>`"),
        ));
    }
    let arch = Arch::from_tag(fields[2])
        .ok_or_else(|| CoreError::format(path, format!("unknown arch tag {:?}", fields[2])))?;
    let d_model: usize = fields[3]
        .parse()
        .map_err(|_| CoreError::format(path, format!("bad dimension field {:?}", fields[3])))?;
    if d_model != arch.d_model() {
        return Err(CoreError::format(
            path,
            format!(
                "header dimension {d_model} does not match arch tag {} ({})",
                arch.tag(),
                arch.d_model()
            ),
        ));
    }
    let mut values = Vec::with_capacity(d_model);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let v: f64 = line
            .parse()
            .map_err(|_| CoreError::format(path, format!("bad value on line {}: {line:?}", i + 2)))?;
        values.push(v);
    }
    if values.len() != d_model {
        return Err(CoreError::format(
            path,
            format!("expected {d_model} values, found {}", values.len()),
        ));
    }
    let params = ParamVec::new(values)
        .map_err(|e| CoreError::format(path, format!("non-finite value: {e}")))?;
    Ok((arch, params))
}

/// Standard checkpoint file path inside `dir`.
pub fn checkpoint_path(dir: &Path, label: &str) -> std::path::PathBuf {
    dir.join(format!("params_{label}.txt"))
}
