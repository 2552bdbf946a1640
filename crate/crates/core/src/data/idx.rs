//! IDX image/label file loading.

use std::path::Path;

use crate::error::{CoreError, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Grayscale images with byte labels, as stored in IDX files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    /// `n * rows * cols` bytes, row-major per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.rows * self.cols;
        &self.pixels[i * p..(i + 1) * p]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(CoreError::format(
                self.path,
                format!("truncated header at byte {}", self.pos),
            ));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::format(
                self.path,
                format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Loads an IDX image file and its companion label file.
///
/// Headers are big-endian: images carry magic `0x00000803` with count, rows,
/// and cols; labels carry magic `0x00000801` with count. The two counts must
/// agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawImages> {
    let img_bytes = std::fs::read(images_path).map_err(|e| CoreError::io(images_path, e))?;
    let mut r = Reader {
        bytes: &img_bytes,
        pos: 0,
        path: images_path,
    };
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(CoreError::format(
            images_path,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(n * rows * cols, "pixel data")?.to_vec();

    let lbl_bytes = std::fs::read(labels_path).map_err(|e| CoreError::io(labels_path, e))?;
    let mut r = Reader {
        bytes: &lbl_bytes,
        pos: 0,
        path: labels_path,
    };
    let magic = r.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(CoreError::format(
            labels_path,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n_labels = r.u32_be()? as usize;
    if n_labels != n {
        return Err(CoreError::format(
            labels_path,
            format!("{n_labels} labels for {n} images"),
        ));
    }
    let labels = r.take(n, "label data")?.to_vec();
    Ok(RawImages {
        rows,
        cols,
        pixels,
        labels,
    })
}

#[cfg(test)]
pub(crate) fn write_idx_pair(
    dir: &Path,
    images: &RawImages,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let img_path = dir.join("images-idx3-ubyte");
    let lbl_path = dir.join("labels-idx1-ubyte");
    let mut img = Vec::new();
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(images.rows as u32).to_be_bytes());
    img.extend_from_slice(&(images.cols as u32).to_be_bytes());
    img.extend_from_slice(&images.pixels);
    std::fs::write(&img_path, img).unwrap();
    let mut lbl = Vec::new();
    lbl.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(images.len() as u32).to_be_bytes());
    lbl.extend_from_slice(&images.labels);
    std::fs::write(&lbl_path, lbl).unwrap();
    (img_path, lbl_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_images() -> RawImages {
        RawImages {
            rows: 2,
            cols: 3,
            pixels: (0..18).collect(),
            labels: vec![4, 7, 1],
        }
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = sample_images();
        let (ip, lp) = write_idx_pair(dir.path(), &imgs);
        let loaded = load_idx(&ip, &lp).unwrap();
        assert_eq!(loaded, imgs);
        assert_eq!(loaded.image(1), &[6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &sample_images());
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&ip, bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &sample_images());
        let mut bytes = std::fs::read(&lp).unwrap();
        bytes[7] = 2;
        std::fs::write(&lp, bytes).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(CoreError::Format { .. })
        ));
    }

    #[test]
    fn truncated_pixels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_idx_pair(dir.path(), &sample_images());
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(err.to_string().contains("truncated pixel data"), "{err}");
    }
}
