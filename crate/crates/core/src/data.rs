//! Synthetic Gaussian-cluster data, Dirichlet partitioning and splits.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Row-major features with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::shape("feature count does not match labels"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows `idx` as a `(len, dim)` tensor plus their labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.subset(idx);
        let t = Tensor::from_rows(idx.len(), self.dim, s.features).expect("rows have dim entries");
        (t, s.labels)
    }

    /// Consecutive batches of at most `size` rows in the order of `order`.
    pub fn batches<'a>(&'a self, order: &'a [usize], size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + 'a {
        order.chunks(size.max(1)).map(move |c| self.batch(c))
    }
}

/// Gaussian clusters with unit covariance around `separation · u_c`.
///
/// The directions `u_c` are orthonormal when `dim ≥ classes`; otherwise
/// they are independent random unit vectors.
pub fn gen_synthetic<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if dim < 1 {
        return Err(Error::invalid("data.dim", "must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::invalid("data.classes", "need at least 2 classes"));
    }
    let centers = random_directions(classes, dim, rng);
    sample_clusters(&centers, n_per_class, separation, rng)
}

/// Cluster directions exactly as [`gen_synthetic`] draws them first.
pub fn cluster_centers<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    random_directions(classes, dim, rng)
}

/// Samples `n_per_class` points per class around the given centers.
pub fn sample_clusters<R: Rng + ?Sized>(
    centers: &[Vec<f64>],
    n_per_class: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let dim = centers.first().map_or(0, |c| c.len());
    let mut features = Vec::with_capacity(centers.len() * n_per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * n_per_class);
    for _ in 0..n_per_class {
        for (c, u) in centers.iter().enumerate() {
            for &x in u {
                let z: f64 = StandardNormal.sample(rng);
                features.push(separation * x + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(dim, centers.len(), features, labels)
}

fn random_directions<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if i < dim {
            // Gram-Schmidt against the previous directions
            for u in &out {
                let p = crate::tensor::dot(&v, u);
                crate::tensor::axpy(-p, u, &mut v);
            }
        }
        let norm = libm::sqrt(crate::tensor::dot(&v, &v));
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

/// Per class, proportions `~ Dir(α·1_N)`; samples of the class are dealt
/// out by cumulative rounding. Shards are disjoint and cover every index.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::invalid("federation.clients", "need at least one client"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("data.alpha", "must be positive and finite"));
    }
    for _attempt in 0..2 {
        let shards = partition_once(labels, clients, alpha, rng)?;
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    Err(Error::EmptyData("a client received no samples after resampling"))
}

fn partition_once<R: Rng + ?Sized>(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let gamma = Gamma::new(alpha, 1.0).map_err(|_| Error::invalid("data.alpha", "invalid Gamma shape"))?;
    let mut shards = vec![Vec::new(); clients];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        let mut cum = 0.0;
        let mut lo = 0;
        for (n, g) in draws.iter().enumerate() {
            cum += g / sum;
            let hi = if n + 1 == clients {
                idx.len()
            } else {
                (libm::floor(cum * idx.len() as f64) as usize).clamp(lo, idx.len())
            };
            shards[n].extend_from_slice(&idx[lo..hi]);
            lo = hi;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Shuffles a shard and splits it 8:2 into (train, test); both parts are
/// non-empty when the shard has at least two samples.
pub fn train_test_split<R: Rng + ?Sized>(shard: &[usize], rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut v = shard.to_vec();
    v.shuffle(rng);
    let n = v.len();
    let mut n_test = libm::round(n as f64 * 0.2) as usize;
    if n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    }
    let test = v.split_off(n - n_test);
    (v, test)
}
