//! Color staining of grayscale images into environment datasets.

use rand::Rng;

use crate::data::idx::RawImages;
use crate::data::{EnvDataset, EnvMeta, FeatureShape, StainMode};
use crate::error::{CoreError, Result};
use crate::model::Sample;
use crate::rng::substream;

/// Pixels strictly above half of full intensity count as foreground.
const FOREGROUND_THRESHOLD: f64 = 0.5;

fn is_stained(gray: f64, mode: StainMode) -> bool {
    match mode {
        StainMode::None => false,
        StainMode::Foreground => gray > FOREGROUND_THRESHOLD,
        StainMode::Background => gray <= FOREGROUND_THRESHOLD,
        StainMode::Both => true,
    }
}

/// Fraction of pixels the given mode would recolor.
pub fn stained_fraction(images: &RawImages, mode: StainMode) -> f64 {
    if images.pixels.is_empty() {
        return 0.0;
    }
    let stained = images
        .pixels
        .iter()
        .filter(|&&p| is_stained(p as f64 / 255.0, mode))
        .count();
    stained as f64 / images.pixels.len() as f64
}

/// Stains images with one palette color per sample and flattens them into
/// feature vectors.
///
/// With probability `corr` the sample's color index follows the combination
/// table (`color_map[label]`, by default `label % palette_size`), otherwise
/// it is uniform over the palette. The output layout per sample is the gray
/// channel (`rows * cols` intensities in `[0, 1]`) followed by
/// `palette_size` blocks of the same size, where block `c` holds 1.0 at
/// every stained pixel of a sample colored `c`.
///
/// Draws come from the `stain` stream of `seed`.
pub fn colorize(
    images: &RawImages,
    mode: StainMode,
    palette_size: usize,
    corr: f64,
    seed: u64,
) -> Result<EnvDataset> {
    let map: Vec<usize> = (0..=images.labels.iter().copied().max().unwrap_or(0) as usize)
        .map(|l| l % palette_size.max(1))
        .collect();
    colorize_with_map(images, mode, palette_size, corr, &map, seed)
}

/// [`colorize`] with an explicit label-to-color combination table.
pub fn colorize_with_map(
    images: &RawImages,
    mode: StainMode,
    palette_size: usize,
    corr: f64,
    color_map: &[usize],
    seed: u64,
) -> Result<EnvDataset> {
    if images.is_empty() {
        return Err(CoreError::EmptyDataset("no images to stain".into()));
    }
    if palette_size == 0 {
        return Err(CoreError::Domain("palette must have at least one color".into()));
    }
    if !(0.0..=1.0).contains(&corr) {
        return Err(CoreError::Domain(format!(
            "stain correlation must be in [0, 1], got {corr}"
        )));
    }
    if let Some(bad) = color_map.iter().find(|&&c| c >= palette_size) {
        return Err(CoreError::Domain(format!(
            "color map entry {bad} is outside the palette of {palette_size}"
        )));
    }
    let p = images.rows * images.cols;
    let dim = p * (1 + palette_size);
    let mut rng = substream(seed, "stain");
    let mut samples = Vec::with_capacity(images.len());
    let mut follow_count = 0usize;
    for i in 0..images.len() {
        let label = images.labels[i] as usize;
        if label >= color_map.len() {
            return Err(CoreError::Domain(format!(
                "label {label} has no entry in the color map (len {})",
                color_map.len()
            )));
        }
        let follows = rng.gen::<f64>() < corr;
        let color = if follows {
            follow_count += 1;
            color_map[label]
        } else {
            rng.gen_range(0..palette_size)
        };
        let mut x = vec![0.0; dim];
        for (j, &byte) in images.image(i).iter().enumerate() {
            let gray = byte as f64 / 255.0;
            x[j] = gray;
            if is_stained(gray, mode) {
                x[p * (1 + color) + j] = 1.0;
            }
        }
        samples.push(Sample::class(x, label));
    }
    // Generation-time check that the scheduled correlation was realized.
    let n = images.len() as f64;
    let realized = follow_count as f64 / n;
    let tol = 6.0 * (corr * (1.0 - corr) / n).sqrt() + 1e-12;
    if (realized - corr).abs() > tol {
        return Err(CoreError::Contract(format!(
            "realized stain correlation {realized} is off schedule {corr}"
        )));
    }
    Ok(EnvDataset {
        env_id: 0,
        samples,
        meta: EnvMeta {
            spurious_corr: corr,
            rotation_deg: 0.0,
            stain_mode: mode,
            palette_size,
        },
        shape: FeatureShape::Flat,
    })
}

/// Wraps raw images as a grayscale environment (no staining), keeping the
/// image shape so the environment can be rotated.
pub fn grayscale_env(images: &RawImages) -> Result<EnvDataset> {
    if images.is_empty() {
        return Err(CoreError::EmptyDataset("no images".into()));
    }
    let samples = (0..images.len())
        .map(|i| {
            Sample::class(
                images.image(i).iter().map(|&b| b as f64 / 255.0).collect(),
                images.labels[i] as usize,
            )
        })
        .collect();
    Ok(EnvDataset {
        env_id: 0,
        samples,
        meta: EnvMeta::default(),
        shape: FeatureShape::Image {
            rows: images.rows,
            cols: images.cols,
        },
    })
}
