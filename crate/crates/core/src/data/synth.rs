//! Synthetic data: invariant/spurious environments, quadratic objectives,
//! and noisy seven-segment digit images.

use rand::Rng;

use crate::data::idx::RawImages;
use crate::data::{EnvDataset, EnvMeta, FeatureShape, StainMode};
use crate::error::{CoreError, Result};
use crate::model::Sample;
use crate::rng::{normal, substream};

/// Distance between the class-conditional means of the invariant block,
/// measured along the discriminating direction. Identical in every
/// environment; the Bayes rule on the invariant block alone is
/// `sign(sum(x_inv))` with accuracy `Phi(SEPARATION)`.
pub const SEPARATION: f64 = 1.0;

/// Magnitude of the (noise-free) spurious block.
pub const SPURIOUS_SCALE: f64 = 2.0;

/// Generates binary-label environments that share one invariant signal and
/// differ in how strongly a spurious block tracks the label.
///
/// Per sample: the label is uniform; the invariant block is a
/// class-conditional Gaussian whose means are fixed across environments;
/// the spurious block is `±SPURIOUS_SCALE/sqrt(d_spur)` aligned with the
/// label with probability `(1 + corr)/2`, so its label correlation is
/// exactly the scheduled value. With `flip_test` the last environment's
/// scheduled correlation is sign-flipped before generation.
///
/// Environment `e` draws from the `synth-env/<e>` stream of `seed`.
pub fn gen_synthetic_envs(
    num_envs: usize,
    n_per_env: usize,
    d_inv: usize,
    d_spur: usize,
    corr_schedule: &[f64],
    flip_test: bool,
    seed: u64,
) -> Result<Vec<EnvDataset>> {
    if num_envs == 0 || n_per_env == 0 || d_inv == 0 || d_spur == 0 {
        return Err(CoreError::Domain(
            "need at least one env, one sample, and one feature per block".into(),
        ));
    }
    if corr_schedule.len() != num_envs {
        return Err(CoreError::Domain(format!(
            "corr_schedule has {} entries for {num_envs} envs",
            corr_schedule.len()
        )));
    }
    if let Some(bad) = corr_schedule.iter().find(|c| !(-1.0..=1.0).contains(*c)) {
        return Err(CoreError::Domain(format!(
            "correlations must lie in [-1, 1], got {bad}"
        )));
    }
    let inv_scale = SEPARATION / (d_inv as f64).sqrt();
    let spur_scale = SPURIOUS_SCALE / (d_spur as f64).sqrt();
    let mut envs = Vec::with_capacity(num_envs);
    for e in 0..num_envs {
        let mut corr = corr_schedule[e];
        if flip_test && e == num_envs - 1 {
            corr = -corr;
        }
        let mut rng = substream(seed, &format!("synth-env/{e}"));
        let mut samples = Vec::with_capacity(n_per_env);
        let mut align_sum = 0.0;
        for _ in 0..n_per_env {
            let label = usize::from(rng.gen_bool(0.5));
            let y_sign = 2.0 * label as f64 - 1.0;
            let mut x = Vec::with_capacity(d_inv + d_spur);
            for _ in 0..d_inv {
                x.push(y_sign * inv_scale + normal(&mut rng));
            }
            let aligned = rng.gen::<f64>() < (1.0 + corr) / 2.0;
            let s = if aligned { y_sign } else { -y_sign };
            align_sum += s * y_sign;
            for _ in 0..d_spur {
                x.push(s * spur_scale);
            }
            samples.push(Sample::class(x, label));
        }
        // The recorded correlation must match the realized one up to
        // sampling noise; a miss here means the generator is broken.
        let empirical = align_sum / n_per_env as f64;
        let tol = 6.0 * ((1.0 - corr * corr).max(0.0) / n_per_env as f64).sqrt() + 1e-12;
        if (empirical - corr).abs() > tol {
            return Err(CoreError::Contract(format!(
                "env {e}: empirical spurious correlation {empirical} is off schedule {corr}"
            )));
        }
        envs.push(EnvDataset {
            env_id: e,
            samples,
            meta: EnvMeta {
                spurious_corr: corr,
                rotation_deg: 0.0,
                stain_mode: StainMode::None,
                palette_size: 0,
            },
            shape: if d_inv >= 2 {
                FeatureShape::Plane { a: 0, b: 1 }
            } else {
                FeatureShape::Flat
            },
        });
    }
    Ok(envs)
}

/// The closed-form decision rule on the invariant block: predict class 1
/// when the block sum is positive.
pub fn invariant_bayes_class(x: &[f64], d_inv: usize) -> usize {
    usize::from(x[..d_inv].iter().sum::<f64>() > 0.0)
}

/// A diagonal quadratic objective `0.5 (w - c)' diag(a) (w - c)`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub curvatures: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn dim(&self) -> usize {
        self.curvatures.len()
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        self.curvatures
            .iter()
            .zip(&self.center)
            .zip(w)
            .map(|((a, c), w)| 0.5 * a * (w - c) * (w - c))
            .sum()
    }

    /// `R(0) - R(center)`, the initial optimality gap.
    pub fn gap_at_zero(&self) -> f64 {
        self.value(&vec![0.0; self.dim()])
    }

    /// Samples that make squared-error linear regression reproduce this
    /// quadratic exactly: one scaled basis vector per coordinate.
    pub fn samples(&self) -> Vec<Sample> {
        let d = self.dim();
        (0..d)
            .map(|j| {
                let scale = (d as f64 * self.curvatures[j]).sqrt();
                let mut x = vec![0.0; d];
                x[j] = scale;
                Sample::value(x, scale * self.center[j])
            })
            .collect()
    }
}

/// Draws `num_clients` diagonal quadratics with curvatures uniform in
/// `curv_range` and centers `N(0, center_scale^2)` per coordinate.
pub fn gen_quadratic_ensemble(
    num_clients: usize,
    dim: usize,
    curv_range: (f64, f64),
    center_scale: f64,
    seed: u64,
) -> Result<Vec<Quadratic>> {
    let (lo, hi) = curv_range;
    if num_clients == 0 || dim == 0 {
        return Err(CoreError::Domain("need at least one client and one dimension".into()));
    }
    if !(lo > 0.0 && hi >= lo) {
        return Err(CoreError::Domain(format!(
            "curvature range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
        )));
    }
    let mut out = Vec::with_capacity(num_clients);
    for i in 0..num_clients {
        let mut rng = substream(seed, &format!("quadratic/{i}"));
        let curvatures = (0..dim).map(|_| rng.gen_range(lo..=hi)).collect();
        let center = (0..dim).map(|_| center_scale * normal(&mut rng)).collect();
        out.push(Quadratic { curvatures, center });
    }
    Ok(out)
}

/// Seven-segment layouts for the digits 0-9:
/// `[top, upper-left, upper-right, middle, lower-left, lower-right, bottom]`.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, false, true, true, true],
    [false, false, true, false, false, true, false],
    [true, false, true, true, true, false, true],
    [true, false, true, true, false, true, true],
    [false, true, true, true, false, true, false],
    [true, true, false, true, false, true, true],
    [true, true, false, true, true, true, true],
    [true, false, true, false, false, true, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Paints the canonical 8x8 glyph for a digit (1.0 on strokes).
fn glyph(digit: usize) -> [f64; 64] {
    let seg = SEGMENTS[digit];
    let mut img = [0.0; 64];
    let mut hline = |row: usize| {
        for col in 1..7 {
            img[row * 8 + col] = 1.0;
        }
    };
    if seg[0] {
        hline(0);
    }
    if seg[3] {
        hline(3);
        hline(4);
    }
    if seg[6] {
        hline(7);
    }
    let mut vline = |col: usize, rows: std::ops::RangeInclusive<usize>| {
        for row in rows {
            img[row * 8 + col] = 1.0;
        }
    };
    if seg[1] {
        vline(0, 1..=3);
    }
    if seg[2] {
        vline(7, 1..=3);
    }
    if seg[4] {
        vline(0, 4..=6);
    }
    if seg[5] {
        vline(7, 4..=6);
    }
    img
}

/// Generates noisy digit images: a uniform digit label per sample, the
/// canonical glyph scaled to `rows x cols` by nearest-neighbor lookup, plus
/// Gaussian pixel noise of standard deviation `noise` (in units of full
/// intensity), clamped to `[0, 1]` and quantized to bytes.
pub fn gen_digit_images(
    n: usize,
    rows: usize,
    cols: usize,
    noise: f64,
    seed: u64,
) -> Result<RawImages> {
    if n == 0 || rows == 0 || cols == 0 {
        return Err(CoreError::Domain("image set must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(CoreError::Domain(format!(
            "pixel noise must be in [0, 1], got {noise}"
        )));
    }
    let mut rng = substream(seed, "digit-images");
    let glyphs: Vec<[f64; 64]> = (0..10).map(glyph).collect();
    let mut pixels = Vec::with_capacity(n * rows * cols);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.gen_range(0..10usize);
        labels.push(digit as u8);
        let g = &glyphs[digit];
        for r in 0..rows {
            for c in 0..cols {
                let gr = r * 8 / rows;
                let gc = c * 8 / cols;
                let v = (g[gr * 8 + gc] + noise * normal(&mut rng)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(RawImages {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Replaces each label by a uniformly random different one with probability
/// `p`, drawing from the `label-noise` stream of `seed`.
///
/// Applied before staining, this caps how predictive the image content can
/// be of the (observed) label while leaving the stain's correlation intact.
pub fn apply_label_noise(images: &mut RawImages, num_classes: usize, p: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Domain(format!(
            "label noise probability must be in [0, 1], got {p}"
        )));
    }
    if num_classes < 2 {
        return Err(CoreError::Domain("label noise needs at least two classes".into()));
    }
    let mut rng = substream(seed, "label-noise");
    for l in images.labels.iter_mut() {
        if rng.gen::<f64>() < p {
            let shift = rng.gen_range(1..num_classes);
            *l = ((*l as usize + shift) % num_classes) as u8;
        }
    }
    Ok(())
}
