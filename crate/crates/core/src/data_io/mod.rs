//! Dataset ingestion and model persistence.

mod cifar;
pub mod persist;

pub use cifar::{load_cifar10, Split, CIFAR10_CLASS_NAMES};
pub use persist::{load_pipeline, save_pipeline, Dtype, TensorBlob, TrainedPipeline};

use crate::error::{Result, SalError};
use crate::tensor::ImageTensor;

/// Images plus integer labels in `[0, K)`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(SalError::InvalidInput(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let k = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(SalError::InvalidClass { index: bad, num_classes: k });
        }
        Ok(Self { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Keeps the first `n` images of every class, preserving order.
    pub fn take_per_class(&self, n: usize) -> LabeledDataset {
        let mut kept = vec![0usize; self.num_classes()];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (img, &l) in self.images.iter().zip(&self.labels) {
            if kept[l] < n {
                kept[l] += 1;
                images.push(img.clone());
                labels.push(l);
            }
        }
        LabeledDataset { images, labels, class_names: self.class_names.clone() }
    }
}

/// Restricts a dataset to two classes, relabeled `{0, 1}` in original order.
pub fn subset_pairs(ds: &LabeledDataset, class_a: usize, class_b: usize) -> Result<LabeledDataset> {
    let k = ds.num_classes();
    if class_a >= k {
        return Err(SalError::InvalidClass { index: class_a, num_classes: k });
    }
    if class_b >= k || class_a == class_b {
        return Err(SalError::InvalidClass { index: class_b, num_classes: k });
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        if l == class_a || l == class_b {
            images.push(img.clone());
            labels.push(usize::from(l == class_b));
        }
    }
    Ok(LabeledDataset {
        images,
        labels,
        class_names: vec![ds.class_names[class_a].clone(), ds.class_names[class_b].clone()],
    })
}
