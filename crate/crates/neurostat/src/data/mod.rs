//! Set-structured corpora: generation, ingestion and persistence.

mod container;
mod idx;
mod spatial;
mod synthetic;

pub use container::{class_name, load_sets, save_labels_csv, save_sets, LabelKind};
pub use idx::{
    load_idx_images, load_idx_labels, read_idx_images, read_idx_labels, write_idx_images,
    write_idx_labels, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use spatial::{spatial_corpus, spatial_from_image, Affine, SpatialSet, DEFAULT_SPATIAL_POINTS};
pub use synthetic::{gen_synthetic_1d, Family, DEFAULT_SAMPLES_PER_SET, DEFAULT_SYNTHETIC_SETS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-set metadata: a class (synthetic family or digit) and, for synthetic
/// sets, the true mean and variance the set was drawn with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetLabel {
    pub class_id: u32,
    pub mean: f64,
    pub variance: f64,
}

/// One dataset: `values` has shape (sample_size, n_features).
#[derive(Clone, Debug)]
pub struct SetRecord {
    pub id: u32,
    pub values: Tensor,
    pub label: Option<SetLabel>,
}

/// A collection of equally sized sets.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sample_size: usize,
    pub n_features: usize,
    pub label_kind: LabelKind,
    pub sets: Vec<SetRecord>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Assembles the rank-3 minibatch for the given set indices.
    pub fn batch(&self, indices: &[usize]) -> Result<DatasetBatch> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let row = self.sample_size * self.n_features;
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut set_ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let set = &self.sets[i];
            if set.values.shape() != [self.sample_size, self.n_features] {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    lhs: vec![self.sample_size, self.n_features],
                    rhs: set.values.shape().to_vec(),
                });
            }
            data.extend_from_slice(set.values.data());
            set_ids.push(set.id);
        }
        Ok(DatasetBatch {
            values: Tensor::new(
                vec![indices.len(), self.sample_size, self.n_features],
                data,
            )?,
            set_ids,
        })
    }

    /// A one-set batch.
    pub fn single(&self, index: usize) -> Result<DatasetBatch> {
        self.batch(&[index])
    }

    /// Sets carrying `class_id` labels, grouped by class (ascending ids).
    pub fn sets_by_class(&self) -> Vec<(u32, Vec<usize>)> {
        let mut classes: Vec<u32> = self
            .sets
            .iter()
            .filter_map(|s| s.label.map(|l| l.class_id))
            .collect();
        classes.sort_unstable();
        classes.dedup();
        classes
            .into_iter()
            .map(|c| {
                let members = self
                    .sets
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label.map(|l| l.class_id) == Some(c))
                    .map(|(i, _)| i)
                    .collect();
                (c, members)
            })
            .collect()
    }
}

/// A minibatch of datasets: rank-3 values of shape
/// (batch size, sample size, n_features). All sets in a batch share a
/// sample size; batching groups equal-sized sets instead of padding.
#[derive(Clone, Debug)]
pub struct DatasetBatch {
    pub values: Tensor,
    pub set_ids: Vec<u32>,
}

impl DatasetBatch {
    /// Builds a batch from one raw set (id 0).
    pub fn from_set(values: &Tensor) -> Result<DatasetBatch> {
        let shape = values.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(DatasetBatch {
            values: values.reshaped(vec![1, shape[0], shape[1]])?,
            set_ids: vec![0],
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn sample_size(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[2]
    }
}
