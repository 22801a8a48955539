//! Models, datasets and client partitioning.

mod data;
mod models;
mod partition;

pub use data::{load_idx, parse_idx, read_fixture, synthetic_classification, write_fixture, FIXTURE_MAGIC};
pub use models::{Architecture, ModelParams};
pub use partition::{partition, ClientDataset, PartitionMode, PARTITION_RETRIES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("label {label} outside 0..{classes}")]
    Label { label: u32, classes: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("format error: {0}")]
    Format(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major `f32` features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, labels: Vec<u32>, n_features: usize, n_classes: usize) -> Result<Self, LearnerError> {
        if n_features == 0 || n_classes == 0 {
            return Err(LearnerError::Empty("feature or class space"));
        }
        if features.len() != labels.len() * n_features {
            return Err(LearnerError::Dimension {
                expected: labels.len() * n_features,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(LearnerError::Label {
                label,
                classes: n_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NonFinite("feature"));
        }
        Ok(Self {
            features,
            labels,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            n_features: self.n_features,
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}
