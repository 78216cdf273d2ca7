//! CIFAR-10 binary batch reader.
//!
//! Each record is 3073 bytes: one label byte followed by 3072 pixel bytes in
//! planar R, G, B row-major order. The loader converts to channel-last and
//! keeps pixel values exactly as stored (0..255 as f32).

use std::fs;
use std::path::Path;

use crate::data_io::LabeledDataset;
use crate::error::{Result, SalError};
use crate::tensor::ImageTensor;

pub const CIFAR10_CLASS_NAMES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

const RECORD_BYTES: usize = 3073;
const PLANE: usize = 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn batch_files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Split::Test => &["test_batch.bin"],
        }
    }
}

/// Loads a CIFAR-10 split from a directory of binary batch files.
///
/// Also accepts the common layout with batches under a
/// `cifar-10-batches-bin/` subdirectory.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let root = if dir.join(split.batch_files()[0]).exists() {
        dir.to_path_buf()
    } else {
        dir.join("cifar-10-batches-bin")
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in split.batch_files() {
        let path = root.join(name);
        if !path.exists() {
            return Err(SalError::DatasetNotFound(path));
        }
        let bytes = fs::read(&path)?;
        if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
            return Err(SalError::CorruptFormat(format!(
                "{}: {} bytes is not a multiple of the {}-byte record size",
                path.display(),
                bytes.len(),
                RECORD_BYTES
            )));
        }
        for record in bytes.chunks_exact(RECORD_BYTES) {
            let label = record[0] as usize;
            if label >= CIFAR10_CLASS_NAMES.len() {
                return Err(SalError::CorruptFormat(format!(
                    "{}: label byte {} out of range",
                    path.display(),
                    label
                )));
            }
            let pixels = &record[1..];
            let mut data = vec![0.0f32; PLANE * 3];
            for p in 0..PLANE {
                data[p * 3] = pixels[p] as f32;
                data[p * 3 + 1] = pixels[PLANE + p] as f32;
                data[p * 3 + 2] = pixels[2 * PLANE + p] as f32;
            }
            images.push(ImageTensor::new(32, 32, 3, data)?);
            labels.push(label);
        }
    }

    let class_names = CIFAR10_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(images, labels, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_batch(path: &Path, records: &[(u8, [u8; 3072])]) {
        let mut f = fs::File::create(path).unwrap();
        for (label, pixels) in records {
            f.write_all(&[*label]).unwrap();
            f.write_all(pixels).unwrap();
        }
    }

    #[test]
    fn label_byte_and_planar_order_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = [0u8; 3072];
        // pixel (row 1, col 2): planar offsets 32 + 2 into each plane
        pixels[34] = 10; // R
        pixels[1024 + 34] = 20; // G
        pixels[2048 + 34] = 30; // B
        write_batch(&dir.path().join("test_batch.bin"), &[(7, pixels)]);
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels[0], 7);
        assert_eq!(ds.images[0].pixel(1, 2), &[10.0, 20.0, 30.0]);
        assert_eq!(ds.images[0].get(0, 0, 0), 0.0);
    }

    #[test]
    fn missing_file_reports_dataset_not_found() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(SalError::DatasetNotFound(_)) => {}
            other => panic!("expected DatasetNotFound, got {other:?}"),
        }
    }

    #[test]
    fn bad_record_size_reports_corrupt_format() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("test_batch.bin"), vec![0u8; 3072]).unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(SalError::CorruptFormat(_)) => {}
            other => panic!("expected CorruptFormat, got {other:?}"),
        }
    }

    #[test]
    fn values_stay_in_byte_range() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = [255u8; 3072];
        pixels[0] = 0;
        write_batch(&dir.path().join("test_batch.bin"), &[(0, pixels)]);
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert!(ds.images[0].min_value() >= 0.0);
        assert!(ds.images[0].max_value() <= 255.0);
    }
}
