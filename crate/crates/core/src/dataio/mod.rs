//! Datasets, checkpoints, run configuration and report files.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod reports;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nngraph::{Batch, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Calibration,
}

/// Labelled examples with features in `[0, 1]` (images) or unconstrained
/// (synthetic point clouds).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::arg(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(|t| t.shape())
    }

    pub fn batch(&self) -> Result<Batch<'_>> {
        Batch::classes(&self.inputs, &self.labels)
    }

    /// Consecutive batches of at most `size` examples.
    pub fn batches(&self, size: usize) -> Result<Vec<Batch<'_>>> {
        if size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        self.inputs
            .chunks(size)
            .zip(self.labels.chunks(size))
            .map(|(x, y)| Batch::classes(x, y))
            .collect()
    }

    /// First `n` examples (all if `n` exceeds the length), retagged.
    pub fn head(&self, n: usize, split: Split) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split,
        }
    }
}
