//! Dataset ingestion, preprocessing, labeled-subset construction, and a
//! synthetic digit generator for self-contained experiments.

mod idx;
mod pgm;
mod synth;
mod translate;

pub use idx::{load_idx, write_idx_images, write_idx_labels};
pub use pgm::to_pgm;
pub use synth::{synth_digits, SynthConfig};
pub use translate::{random_translate, translate};

use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SUBSET};
use crate::tensor::Tensor;
use rand::seq::index::sample;

/// A batch-major image collection: `[N, C, H, W]` pixels in `[0,1]` after
/// loading, plus optional integer class labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(format!(
                "dataset images must be [N, C, H, W], got rank {}",
                images.rank()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::invalid(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (channels, height, width) of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Number of classes, taken as one past the largest label.
    pub fn num_classes(&self) -> Result<usize> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no labels"))?;
        let max = labels
            .iter()
            .max()
            .ok_or_else(|| Error::invalid("dataset is empty"))?;
        Ok(max + 1)
    }

    /// Gather the given rows (repeats allowed) into a new dataset.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let (c, h, w) = self.image_shape();
        let stride = c * h * w;
        let mut images = Tensor::zeros(&[indices.len(), c, h, w]);
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            images.data_mut()[row * stride..(row + 1) * stride]
                .copy_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(images, labels, self.name.clone())
    }

    /// Subtract the dataset-wide mean pixel value, returning it. Pixel
    /// values become mean-zero (and may go negative).
    pub fn standardize(&mut self) -> f64 {
        let n = self.images.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.images.data().iter().sum::<f64>() / n as f64;
        for v in self.images.data_mut() {
            *v -= mean;
        }
        mean
    }
}

/// A class-balanced set of labeled indices into a parent dataset.
#[derive(Clone, Debug)]
pub struct LabeledSubset {
    pub indices: Vec<usize>,
    pub per_class: usize,
}

impl LabeledSubset {
    /// Boolean labeled-flag per dataset row.
    pub fn flags(&self, n: usize) -> Vec<bool> {
        let mut f = vec![false; n];
        for &i in &self.indices {
            f[i] = true;
        }
        f
    }
}

/// Draw `n_labeled` indices with exactly `n_labeled / classes` per class,
/// uniformly without replacement, deterministically per seed.
pub fn sample_labeled_subset(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<LabeledSubset> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("cannot draw a labeled subset from unlabeled data"))?;
    let classes = ds.num_classes()?;
    if n_labeled == 0 || n_labeled % classes != 0 {
        return Err(Error::invalid(format!(
            "labeled subset size {n_labeled} not divisible by {classes} classes"
        )));
    }
    let per_class = n_labeled / classes;
    let mut rng = rng::stream(seed, STREAM_SUBSET);
    let mut indices = Vec::with_capacity(n_labeled);
    for class in 0..classes {
        let pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if pool.len() < per_class {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, need {per_class}",
                pool.len()
            )));
        }
        let picks = sample(&mut rng, pool.len(), per_class);
        indices.extend(picks.iter().map(|p| pool[p]));
    }
    indices.sort_unstable();
    Ok(LabeledSubset { indices, per_class })
}
