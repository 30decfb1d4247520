//! Reader for the big-endian IDX image/label format.

use std::path::{Path, PathBuf};

use thiserror::Error;

use abnn_core::data::{DataError, Dataset};
use abnn_core::tensor::{DType, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Error, Debug)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        if self.offset + n > self.bytes.len() {
            return Err(IdxError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32, IdxError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses an IDX image file (magic 0x00000803) into `[n, rows * cols]`
/// pixel rows scaled to `[0, 1]`, and an IDX label file (magic 0x00000801)
/// into integer labels. The item counts must match.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    dtype: DType,
) -> Result<Dataset, IdxError> {
    let image_bytes = read_file(images_path)?;
    let mut r = Reader {
        bytes: &image_bytes,
        offset: 0,
        path: images_path,
    };
    let magic = r.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.take(count * rows * cols)?;
    let values: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();

    let label_bytes = read_file(labels_path)?;
    let mut r = Reader {
        bytes: &label_bytes,
        offset: 0,
        path: labels_path,
    };
    let magic = r.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let label_count = r.u32_be()? as usize;
    let labels: Vec<usize> = r.take(label_count)?.iter().map(|&b| b as usize).collect();

    if count != label_count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let inputs = Tensor::from_f64_values(vec![count, rows * cols], &values, dtype)
        .expect("pixel count matches header");
    Ok(Dataset::new(inputs, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_images(path: &Path, count: u32, rows: u32, cols: u32, pixels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&count.to_be_bytes());
        bytes.extend_from_slice(&rows.to_be_bytes());
        bytes.extend_from_slice(&cols.to_be_bytes());
        bytes.extend_from_slice(pixels);
        std::fs::write(path, bytes).unwrap();
    }

    fn write_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn parses_the_documented_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let labels = dir.path().join("labels");
        // Two 3x3 images: all zeros and all 255.
        let mut pixels = vec![0u8; 9];
        pixels.extend(vec![255u8; 9]);
        write_images(&images, 2, 3, 3, &pixels);
        write_labels(&labels, &[1, 0]);

        let data = load_idx(&images, &labels, DType::F32).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.features(), 9);
        assert_eq!(data.labels(), &[1, 0]);
        assert!(data.input_row(0).to_f64_vec().iter().all(|&v| v == 0.0));
        assert!(data.input_row(1).to_f64_vec().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn bad_magic_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let labels = dir.path().join("labels");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes()); // label magic in image file
        bytes.extend_from_slice(&1u32.to_be_bytes());
        std::fs::write(&images, bytes).unwrap();
        write_labels(&labels, &[0]);
        assert!(matches!(
            load_idx(&images, &labels, DType::F32),
            Err(IdxError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let labels = dir.path().join("labels");
        write_images(&images, 2, 3, 3, &[7u8; 10]); // 18 pixels promised, 10 given
        write_labels(&labels, &[0, 1]);
        assert!(matches!(
            load_idx(&images, &labels, DType::F32),
            Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn count_mismatch_is_a_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("images");
        let labels = dir.path().join("labels");
        write_images(&images, 2, 2, 2, &[1u8; 8]);
        write_labels(&labels, &[0, 1, 1]);
        assert!(matches!(
            load_idx(&images, &labels, DType::F32),
            Err(IdxError::CountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }

    #[test]
    fn missing_file_reports_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope");
        let labels = dir.path().join("labels");
        write_labels(&labels, &[0]);
        assert!(matches!(
            load_idx(&missing, &labels, DType::F32),
            Err(IdxError::Io { .. })
        ));
    }
}
