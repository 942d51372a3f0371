//! Datasets, held-out splitting and non-IID client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if !features.is_matrix() || features.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for feature tensor of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside 0..{num_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::Dataset("features contain non-finite values".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Feature rows and one-hot labels for `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let x = self.features.select_rows(indices);
        let y = one_hot(indices.iter().map(|&i| self.labels[i]), self.num_classes);
        (x, y)
    }
}

pub fn one_hot(labels: impl ExactSizeIterator<Item = usize>, classes: usize) -> Tensor {
    let n = labels.len();
    let mut y = Tensor::zeros(&[n, classes]);
    for (i, l) in labels.enumerate() {
        y.data_mut()[i * classes + l] = 1.0;
    }
    y
}

/// Gaussian-mixture classification task. Each class owns `modes_per_class`
/// centers drawn from `N(0, center_scale²)` per coordinate; samples add
/// isotropic `N(0, noise²)` around a uniformly chosen center of their class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    #[serde(default = "one")]
    pub modes_per_class: usize,
    pub center_scale: f64,
    pub noise: f64,
}

fn one() -> usize {
    1
}

impl SyntheticSpec {
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        if self.classes < 2 {
            v.push(("classes".into(), "must be ≥ 2".into()));
        }
        if self.dim == 0 {
            v.push(("dim".into(), "must be ≥ 1".into()));
        }
        if self.samples_per_class < 2 {
            v.push(("samples_per_class".into(), "must be ≥ 2".into()));
        }
        if self.modes_per_class == 0 {
            v.push(("modes_per_class".into(), "must be ≥ 1".into()));
        }
        for (name, x) in [("center_scale", self.center_scale), ("noise", self.noise)] {
            if !(x.is_finite() && x > 0.0) {
                v.push((name.into(), format!("must be a finite value > 0, got {x}")));
            }
        }
        v
    }
}

/// Samples are emitted class by class; the generator is private to `seed`.
pub fn gaussian_mixture(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers_dist = Normal::new(0.0, spec.center_scale).expect("validated scale");
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let centers: Vec<Vec<f64>> = (0..spec.classes * spec.modes_per_class)
        .map(|_| (0..spec.dim).map(|_| centers_dist.sample(&mut rng)).collect())
        .collect();
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let mode = rng.random_range(0..spec.modes_per_class);
            let center = &centers[c * spec.modes_per_class + mode];
            data.extend(center.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_raw(vec![n, spec.dim], data), labels, spec.classes)
        .expect("generator output is consistent")
}

/// Reads a headed CSV: every column except `label_column` is a feature; labels
/// are integers starting at 0.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| {
        Error::Dataset(format!(
            "{}: no column named `{label_column}` (have: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Dataset(format!("{}: no feature columns", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        for (j, field) in record.iter().enumerate() {
            if j == label_idx {
                let l: usize = field.trim().parse().map_err(|_| {
                    Error::Dataset(format!(
                        "{}:{line}: label `{field}` is not a nonnegative integer",
                        path.display()
                    ))
                })?;
                labels.push(l);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Dataset(format!(
                        "{}:{line}: column `{}` value `{field}` is not a number",
                        path.display(),
                        &headers[j]
                    ))
                })?;
                data.push(v);
            }
        }
    }
    if labels.len() < 2 {
        return Err(Error::Dataset(format!("{}: fewer than 2 rows", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

/// Per class, shuffles its indices and holds out `round(fraction·n_c)` of
/// them. Both returned lists are sorted.
pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let k = (fraction * idx.len() as f64).round() as usize;
        held.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

const MAX_PARTITION_ATTEMPTS: usize = 10_000;

/// Splits `indices` across `clients` with per-class Dirichlet(α) proportions.
///
/// Classes are visited in ascending order. For each, the class's indices are
/// shuffled, one `Gamma(α, 1)` value is drawn per client and normalized, and
/// client `k` receives the slice between `floor(n_c·P_{k−1})` and
/// `floor(n_c·P_k)` of the cumulative proportions (the last client takes the
/// rest). If any client ends up empty the whole draw is repeated with the same
/// generator.
pub fn dirichlet_partition(
    indices: &[usize],
    labels: &[usize],
    num_classes: usize,
    clients: usize,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::Dataset("at least one client is required".into()));
    }
    if clients > indices.len() {
        return Err(Error::Dataset(format!(
            "{clients} clients but only {} training samples",
            indices.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Dataset(format!("invalid concentration {alpha}: {e}")))?;
    let by_class: Vec<Vec<usize>> = (0..num_classes)
        .map(|c| indices.iter().copied().filter(|&i| labels[i] == c).collect())
        .collect();

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut parts = vec![Vec::new(); clients];
        for class in &by_class {
            let mut idx = class.clone();
            idx.shuffle(rng);
            let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let n = idx.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (k, d) in draws.iter().enumerate() {
                cum += d;
                let end = if k + 1 == clients {
                    n
                } else {
                    (((cum / total) * n as f64).floor() as usize).min(n)
                };
                let end = end.max(start);
                parts[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
    }
    Err(Error::Dataset(format!(
        "could not give every one of {clients} clients a sample after {MAX_PARTITION_ATTEMPTS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn balanced(classes: usize, per: usize) -> Vec<usize> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    #[test]
    fn single_client_gets_everything() {
        let labels = balanced(3, 10);
        let idx: Vec<usize> = (0..30).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let parts = dirichlet_partition(&idx, &labels, 3, 1, 1.0, &mut rng).unwrap();
        assert_eq!(parts, vec![idx]);
    }

    #[test]
    fn more_clients_than_samples_is_rejected() {
        let labels = balanced(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = dirichlet_partition(&[0, 1, 2, 3], &labels, 2, 5, 1.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
    }

    /// Second implementation of the same draw sequence, written from the
    /// documented contract rather than the code above.
    #[allow(clippy::needless_range_loop)]
    fn oracle_histograms(labels: &[usize], classes: usize, n: usize, alpha: f64, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Gamma::new(alpha, 1.0).unwrap();
        loop {
            let mut hist = vec![vec![0usize; classes]; n];
            for c in 0..classes {
                let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
                members.shuffle(&mut rng);
                let w: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
                let s: f64 = w.iter().sum();
                let cuts: Vec<usize> = (1..n)
                    .map(|k| ((w[..k].iter().sum::<f64>() / s) * members.len() as f64).floor() as usize)
                    .collect();
                let mut prev = 0;
                for k in 0..n {
                    let end = if k + 1 == n { members.len() } else { cuts[k].max(prev) };
                    hist[k][c] += end - prev;
                    prev = end;
                }
            }
            if hist.iter().all(|h| h.iter().sum::<usize>() > 0) {
                return hist;
            }
        }
    }

    #[test]
    fn matches_independent_reimplementation() {
        let labels = balanced(4, 100);
        let idx: Vec<usize> = (0..400).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let parts = dirichlet_partition(&idx, &labels, 4, 4, 1.0, &mut rng).unwrap();
        let got: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| {
                let mut h = vec![0; 4];
                for &i in p {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect();
        assert_eq!(got, oracle_histograms(&labels, 4, 4, 1.0, 7));
    }

    #[test]
    fn stratified_split_keeps_class_ratios() {
        let labels = balanced(4, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (train, held) = stratified_split(&labels, 4, 0.2, &mut rng);
        assert_eq!(held.len(), 40);
        assert_eq!(train.len(), 160);
        for c in 0..4 {
            assert_eq!(held.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        let all: BTreeSet<usize> = train.iter().chain(&held).copied().collect();
        assert_eq!(all.len(), 200);
    }

    #[test]
    fn mixture_is_seeded_and_labeled() {
        let spec = SyntheticSpec {
            classes: 3,
            dim: 4,
            samples_per_class: 5,
            modes_per_class: 2,
            center_scale: 1.0,
            noise: 0.5,
        };
        let a = gaussian_mixture(&spec, 11);
        let b = gaussian_mixture(&spec, 11);
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
        assert_eq!(a.dim(), 4);
        assert_eq!(a.labels()[5..10], [1; 5]);
        assert_ne!(a, gaussian_mixture(&spec, 12));
    }

    #[test]
    fn batch_is_one_hot() {
        let ds = Dataset::new(
            Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            vec![2, 0, 1],
            3,
        )
        .unwrap();
        let (x, y) = ds.batch(&[2, 0]);
        assert_eq!(x.data(), &[3.0, 1.0]);
        assert_eq!(y.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "a,label,b\n1.0,0,2.0\n3.0,1,4.0\n5,1,6\n").unwrap();
        let ds = load_csv(&good, "label").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.features().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        assert!(load_csv(&good, "target").unwrap_err().to_string().contains("no column"));
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,label\n1.0,0\nx,1\n").unwrap();
        assert!(load_csv(&bad, "label").unwrap_err().to_string().contains(":3:"));
        assert!(load_csv(&dir.path().join("missing.csv"), "label").is_err());
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_and_covering(n in 1usize..8, alpha in 0.3f64..5.0, seed in 0u64..500) {
            let labels = balanced(5, 12);
            let idx: Vec<usize> = (0..60).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let parts = dirichlet_partition(&idx, &labels, 5, n, alpha, &mut rng).unwrap();
            prop_assert_eq!(parts.len(), n);
            let mut seen = BTreeSet::new();
            for p in &parts {
                prop_assert!(!p.is_empty());
                for &i in p {
                    prop_assert!(seen.insert(i));
                }
            }
            prop_assert_eq!(seen.len(), 60);
        }
    }
}
