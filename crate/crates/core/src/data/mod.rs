//! Datasets, preprocessing, synthetic domain pairs and seeded batching.

mod idx;
mod preprocess;
mod synth;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use preprocess::{preprocess, LUMA};
pub use synth::{
    glyph_names, render_glyph, shift_image, synth_domain_pair, GlyphPose, SynthKind, SyntheticSpec,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Value range of stored samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Range {
    /// Raw bytes, `[0, 255]`.
    Bytes,
    /// Network input range, `[-1, 1]`.
    Signed,
}

/// Samples of one domain, stored flat in sample-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    values: Vec<f32>,
    labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub domain: Domain,
    pub range: Range,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        values: Vec<f32>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        domain: Domain,
        range: Range,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || values.is_empty() || values.len() % per != 0 {
            return Err(Error::Data(format!(
                "{} values do not form whole samples of shape {sample_shape:?}",
                values.len()
            )));
        }
        let n = values.len() / per;
        let (lo, hi) = match range {
            Range::Bytes => (0.0, 255.0),
            Range::Signed => (-1.0, 1.0),
        };
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Data(format!("value {v} outside [{lo}, {hi}]")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Data(format!("{} labels for {n} samples", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(Error::Data(format!("label {bad} >= {num_classes} classes")));
            }
        }
        Ok(Self {
            sample_shape,
            values,
            labels,
            num_classes,
            domain,
            range,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.values[i * n..(i + 1) * n]
    }

    /// Labels for evaluation. Training code receives an [`UnlabeledView`] of the
    /// target domain instead, which has no route to these.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Samples `indices` stacked into `[B, ...]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, data).expect("consistent by construction")
    }

    /// All samples as one tensor.
    pub fn tensor(&self) -> Tensor<f32> {
        let mut shape = vec![self.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, self.values.clone()).expect("consistent by construction")
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            values: self.values[..n * self.sample_len()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
            sample_shape: self.sample_shape.clone(),
            num_classes: self.num_classes,
            domain: self.domain,
            range: self.range,
        }
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView(self)
    }

    pub fn batch(&self, batch_size: usize, seed: u64, step: u64) -> Result<DomainBatch> {
        let idx = batch_indices(self.len(), batch_size, seed, step)?;
        Ok(DomainBatch {
            images: self.gather(&idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            domain: self.domain,
        })
    }
}

/// Image-only access to a dataset: what the trainer sees of the target domain.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a>(&'a Dataset);

impl UnlabeledView<'_> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.0.sample_shape()
    }

    pub fn batch(&self, batch_size: usize, seed: u64, step: u64) -> Result<DomainBatch> {
        let idx = batch_indices(self.0.len(), batch_size, seed, step)?;
        Ok(DomainBatch {
            images: self.0.gather(&idx),
            labels: None,
            domain: self.0.domain,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
}

/// Indices of batch `step`: each epoch walks a fresh permutation seeded by
/// `(seed, epoch)`; the last batch of an epoch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Data(format!(
            "batch size {batch_size} for {n} samples"
        )));
    }
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    perm.shuffle(&mut rng);
    let end = ((pos + 1) * batch_size).min(n);
    Ok(perm[pos * batch_size..end].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_pure() {
        assert_eq!(
            batch_indices(100, 7, 3, 12).unwrap(),
            batch_indices(100, 7, 3, 12).unwrap()
        );
    }

    #[test]
    fn epoch_is_a_permutation() {
        let mut seen = vec![0; 50];
        for step in 0..7 {
            for i in batch_indices(50, 8, 1, step).unwrap() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_ne!(
            batch_indices(50, 8, 1, 0).unwrap(),
            batch_indices(50, 8, 1, 7).unwrap()
        );
    }

    #[test]
    fn seeds_differ() {
        let mut a = batch_indices(1000, 64, 1, 0).unwrap();
        let mut b = batch_indices(1000, 64, 2, 0).unwrap();
        a.sort_unstable();
        b.sort_unstable();
        assert_ne!(a, b);
    }

    #[test]
    fn oversize_batch_rejected() {
        assert!(batch_indices(3, 4, 0, 0).is_err());
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(Dataset::new(
            vec![2],
            vec![0.0, 1.5],
            None,
            1,
            Domain::Source,
            Range::Signed
        )
        .is_err());
        assert!(Dataset::new(
            vec![2],
            vec![0.0, 1.0],
            Some(vec![3]),
            2,
            Domain::Source,
            Range::Signed
        )
        .is_err());
    }
}
