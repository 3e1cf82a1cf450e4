//! Dataset ingestion, label encoding, client partitioning and validation splits.

mod idx;
mod partition;

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seed;

pub use idx::{load_idx_file, read_idx, write_idx, IdxTensor};
pub use partition::{dirichlet_partition, iid_partition, Partition};

/// Image classification data with pixel intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Height and width of each image, if known.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::mismatch("dataset rows", images.nrows(), labels.len()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        Ok(Self {
            images,
            labels,
            classes,
            image_shape: None,
        })
    }

    /// Builds a dataset from an image tensor (`N × rows × cols`, scaled by
    /// 1/255) and a label vector.
    pub fn from_idx(images: &IdxTensor, labels: &IdxTensor, classes: usize) -> Result<Self> {
        if labels.dims.len() != 1 {
            return Err(Error::mismatch("label tensor rank", 1, labels.dims.len()));
        }
        if images.items() != labels.items() {
            return Err(Error::mismatch("image/label count", images.items(), labels.items()));
        }
        let width = images.item_len();
        let pixels = Array2::from_shape_vec(
            (images.items(), width),
            images.data.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("payload length checked on read");
        let mut ds = Self::new(
            pixels,
            labels.data.iter().map(|&l| l as usize).collect(),
            classes,
        )?;
        if images.dims.len() == 3 {
            ds.image_shape = Some((images.dims[1], images.dims[2]));
        }
        Ok(ds)
    }

    pub fn load(images: &Path, labels: &Path, classes: usize) -> Result<Self> {
        Self::from_idx(&load_idx_file(images)?, &load_idx_file(labels)?, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image_shape: self.image_shape,
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sub = self.select(indices);
        Batch::new(sub.images, sub.labels, self.classes).expect("labels validated")
    }

    /// Average-pools each image over `factor × factor` blocks.
    pub fn downsample(&self, factor: usize) -> Result<Dataset> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let (h, w) = self
            .image_shape
            .ok_or(Error::invalid("downsample", "image shape unknown"))?;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(
                "downsample",
                format!("{h}×{w} images are not divisible by {factor}"),
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = (factor * factor) as f64;
        let mut out = Array2::zeros((self.len(), oh * ow));
        for (src, mut dst) in self.images.outer_iter().zip(out.outer_iter_mut()) {
            for r in 0..h {
                for c in 0..w {
                    dst[(r / factor) * ow + c / factor] += src[r * w + c] / norm;
                }
            }
        }
        Ok(Dataset {
            images: out,
            labels: self.labels.clone(),
            classes: self.classes,
            image_shape: Some((oh, ow)),
        })
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (n, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        out[[n, l]] = 1.0;
    }
    Ok(out)
}

/// Stratified split into `(validation, holdout)`. The validation part holds
/// `round(ratio · N)` samples, allocated across classes by largest remainder
/// so each class is within one sample of `ratio · class_count`.
pub fn split_validation(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (val, hold) = split_indices(&data.labels, data.classes, ratio, seed)?;
    Ok((data.select(&val), data.select(&hold)))
}

pub(crate) fn split_indices(
    labels: &[usize],
    classes: usize,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(
            "validation_ratio",
            format!("must lie in (0, 1), got {ratio}"),
        ));
    }
    let mut pools = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        pools[l].push(i);
    }
    let target = (ratio * labels.len() as f64).round() as usize;
    let sizes: Vec<f64> = pools.iter().map(|p| p.len() as f64).collect();
    let quotas = partition::largest_remainder(target, &sizes);
    let mut rng = seed::rng(seed);
    let (mut val, mut hold) = (Vec::new(), Vec::new());
    for (pool, &q) in pools.iter_mut().zip(&quotas) {
        pool.shuffle(&mut rng);
        val.extend_from_slice(&pool[..q]);
        hold.extend_from_slice(&pool[q..]);
    }
    val.sort_unstable();
    hold.sort_unstable();
    Ok((val, hold))
}
