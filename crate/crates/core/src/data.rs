//! Synthetic datasets, CSV ingestion, semi-supervised splits and batch
//! sampling.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Independent, reproducible random stream for `(seed, purpose, index)`.
pub fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | (index & ((1 << 48) - 1)));
    rng
}

pub const STREAM_LABELED: u64 = 1;
pub const STREAM_UNLABELED: u64 = 2;
pub const STREAM_AUGMENT: u64 = 3;
pub const STREAM_GENERATE: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;

/// Feature matrix with optional class labels (`None` = unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<Option<usize>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<Option<usize>>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape("Dataset::new", features.shape(), [labels.len(), 1]));
        }
        if let Some(l) = labels.iter().flatten().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!("label {l} out of range for {classes} classes")));
        }
        if !features.is_finite() {
            return Err(Error::Validation("dataset contains non-finite features".into()));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
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

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for l in self.labels.iter().flatten() {
            counts[*l] += 1;
        }
        counts
    }
}

fn check_size(n: usize, classes: usize) -> Result<()> {
    if classes == 0 || n < 2 * classes {
        return Err(Error::Parameter(format!("need n >= 2C, got n={n}, C={classes}")));
    }
    Ok(())
}

/// Per-column zero mean and unit variance; constant columns are only centred.
fn standardize(features: &mut Tensor) {
    let (n, d) = (features.rows(), features.cols());
    for j in 0..d {
        let mean = (0..n).map(|i| features.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (features.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            let centred = features.get(i, j) - mean;
            features.set(i, j, if sd > 0.0 { centred / sd } else { centred });
        }
    }
}

fn finish(points: Vec<[f64; 2]>, labels: Vec<usize>, classes: usize) -> Result<Dataset> {
    let mut features = Tensor::from_rows(&points)?;
    standardize(&mut features);
    Dataset::new(features, labels.into_iter().map(Some).collect(), classes)
}

/// Two interleaving half circles.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_size(n, 2)?;
    let mut rng = stream_rng(seed, STREAM_GENERATE, 0);
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let theta = PI * i as f64 / (n_outer - 1) as f64;
        points.push([theta.cos(), theta.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let theta = PI * i as f64 / (n_inner - 1) as f64;
        points.push([1.0 - theta.cos(), 0.5 - theta.sin()]);
        labels.push(1);
    }
    add_noise(&mut points, noise, &mut rng);
    finish(points, labels, 2)
}

/// A circle of radius 1 around a concentric circle of radius 0.5.
pub fn gen_circles(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_size(n, 2)?;
    let mut rng = stream_rng(seed, STREAM_GENERATE, 1);
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (count, radius, label) in [(n_outer, 1.0, 0), (n_inner, 0.5, 1)] {
        for i in 0..count {
            let theta = 2.0 * PI * i as f64 / count as f64;
            points.push([radius * theta.cos(), radius * theta.sin()]);
            labels.push(label);
        }
    }
    add_noise(&mut points, noise, &mut rng);
    finish(points, labels, 2)
}

/// Isotropic Gaussian blobs around centres drawn uniformly from `[-10, 10]²`.
pub fn gen_blobs(n: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    check_size(n, classes)?;
    let mut rng = stream_rng(seed, STREAM_GENERATE, 2);
    let centres: Vec<[f64; 2]> = (0..classes)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        points.push(centres[c]);
        labels.push(c);
    }
    add_noise(&mut points, spread, &mut rng);
    finish(points, labels, classes)
}

fn add_noise(points: &mut [[f64; 2]], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for p in points {
        for v in p.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sigma * z;
        }
    }
}

/// Writes `x0,…,x{d−1},label` with `-1` for unlabeled rows.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (row, label) in dataset.features.row_iter().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        rec.push(label.map_or("-1".to_string(), |l| l.to_string()));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Reads a dataset written by [`save_csv`]. The class count is the largest
/// label plus one.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let header = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let width = header.len();
    let expected: Vec<String> = (0..width.saturating_sub(1))
        .map(|j| format!("x{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if width < 2 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("expected header {}", expected.join(","))));
    }
    let dim = width - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", rec.len())));
        }
        for field in rec.iter().take(dim) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            data.push(v);
        }
        let raw = &rec[dim];
        let label: i64 = raw
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label `{raw}`")))?;
        labels.push(match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(parse_err(line, format!("invalid label {l}"))),
        });
    }
    let classes = match labels.iter().flatten().max() {
        Some(&m) => m + 1,
        None => return Err(Error::Validation(format!("{}: no labeled data", path.display()))),
    };
    let features = Tensor::new(labels.len(), dim, data)?;
    Dataset::new(features, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub labeled_per_class: usize,
    pub seed: u64,
    pub test_fraction: f64,
}

/// Labeled rows with their classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Row indices into the source dataset.
    pub indices: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unlabeled training pool: features only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPool {
    pub features: Tensor,
    pub indices: Vec<usize>,
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SslSplit {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledPool,
    /// Ground truth of the unlabeled pool, for metrics only.
    pub unlabeled_truth: Vec<Option<usize>>,
    pub test: LabeledSet,
    pub classes: usize,
}

/// Stratified labeled/unlabeled/test split, deterministic per seed.
pub fn make_ssl_split(dataset: &Dataset, spec: &SplitSpec) -> Result<SslSplit> {
    if spec.labeled_per_class == 0 {
        return Err(Error::Parameter("labeled_per_class must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Parameter(format!("test_fraction must be in [0, 1), got {}", spec.test_fraction)));
    }
    let c = dataset.classes;
    let n = dataset.len();
    if (spec.labeled_per_class * c) as f64 > n as f64 * (1.0 - spec.test_fraction) {
        return Err(Error::Parameter(format!(
            "infeasible split: {} labeled per class × {c} classes exceeds the training set",
            spec.labeled_per_class
        )));
    }
    let mut rng = stream_rng(spec.seed, STREAM_SPLIT, 0);
    let mut known: Vec<usize> = (0..n).filter(|&i| dataset.labels[i].is_some()).collect();
    known.shuffle(&mut rng);
    let n_test = (spec.test_fraction * known.len() as f64).round() as usize;
    let (test_idx, train_idx) = known.split_at(n_test);

    let mut taken = vec![0usize; c];
    let mut labeled_idx = Vec::new();
    let mut unlabeled_idx = Vec::new();
    for &i in train_idx {
        let l = dataset.labels[i].expect("filtered to labeled rows");
        if taken[l] < spec.labeled_per_class {
            taken[l] += 1;
            labeled_idx.push(i);
        } else {
            unlabeled_idx.push(i);
        }
    }
    if let Some(class) = taken.iter().position(|&t| t < spec.labeled_per_class) {
        return Err(Error::Parameter(format!(
            "infeasible split: class {class} has only {} training samples",
            taken[class]
        )));
    }
    unlabeled_idx.extend((0..n).filter(|&i| dataset.labels[i].is_none()));

    let labeled_set = |idx: &[usize]| LabeledSet {
        features: dataset.features.select_rows(idx),
        labels: idx.iter().map(|&i| dataset.labels[i].expect("labeled")).collect(),
        indices: idx.to_vec(),
    };
    Ok(SslSplit {
        labeled: labeled_set(&labeled_idx),
        unlabeled: UnlabeledPool {
            features: dataset.features.select_rows(&unlabeled_idx),
            indices: unlabeled_idx.clone(),
        },
        unlabeled_truth: unlabeled_idx.iter().map(|&i| dataset.labels[i]).collect(),
        test: labeled_set(test_idx),
        classes: c,
    })
}

/// Positions of one step's batches within the labeled set and unlabeled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Deterministic batch composition addressed by step number.
///
/// Labeled positions are drawn with replacement. Unlabeled positions walk
/// through a fresh permutation of the pool each epoch, so every position
/// appears exactly once per epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n_labeled: usize,
    n_unlabeled: usize,
    batch_size: usize,
    mu: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n_labeled: usize, n_unlabeled: usize, batch_size: usize, mu: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || mu == 0 {
            return Err(Error::Parameter(format!("batch size and mu must be >= 1, got {batch_size}, {mu}")));
        }
        if n_labeled == 0 || n_unlabeled == 0 {
            return Err(Error::State(format!(
                "cannot sample from empty pools ({n_labeled} labeled, {n_unlabeled} unlabeled)"
            )));
        }
        Ok(BatchSampler {
            n_labeled,
            n_unlabeled,
            batch_size,
            mu,
            seed,
            cached: None,
        })
    }

    pub fn unlabeled_batch_size(&self) -> usize {
        self.batch_size * self.mu
    }

    fn epoch_perm(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.n_unlabeled).collect();
            perm.shuffle(&mut stream_rng(self.seed, STREAM_UNLABELED, epoch));
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    pub fn batch(&mut self, step: u64) -> BatchIndices {
        let mut rng = stream_rng(self.seed, STREAM_LABELED, step);
        let labeled = (0..self.batch_size)
            .map(|_| rng.random_range(0..self.n_labeled))
            .collect();
        let ub = self.unlabeled_batch_size() as u64;
        let n = self.n_unlabeled as u64;
        let unlabeled = (0..ub)
            .map(|j| {
                let pos = step * ub + j;
                self.epoch_perm(pos / n)[(pos % n) as usize]
            })
            .collect();
        BatchIndices { labeled, unlabeled }
    }

    /// Batches for steps `0, 1, 2, …`.
    pub fn iter(&mut self) -> impl Iterator<Item = BatchIndices> + '_ {
        (0u64..).map(move |s| self.batch(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(gen_two_moons(200, 0.1, 7).unwrap(), gen_two_moons(200, 0.1, 7).unwrap());
        assert_ne!(gen_two_moons(200, 0.1, 7).unwrap(), gen_two_moons(200, 0.1, 8).unwrap());
        assert_eq!(gen_circles(50, 0.05, 1).unwrap(), gen_circles(50, 0.05, 1).unwrap());
        assert_eq!(gen_blobs(60, 3, 0.5, 2).unwrap(), gen_blobs(60, 3, 0.5, 2).unwrap());
    }

    #[test]
    fn generators_are_standardized() {
        let d = gen_two_moons(1001, 0.15, 3).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..d.len()).map(|i| d.features.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        let counts = d.class_counts();
        assert!(counts[0].abs_diff(counts[1]) <= 1);
    }

    #[test]
    fn zero_spread_blobs_collapse_per_class() {
        let d = gen_blobs(30, 3, 0.0, 4).unwrap();
        for i in 0..d.len() {
            let j = i % 3;
            assert_eq!(d.features.row_slice(i), d.features.row_slice(j));
            assert_eq!(d.labels[i], Some(j));
        }
    }

    #[test]
    fn generators_reject_tiny_n() {
        assert!(matches!(gen_two_moons(3, 0.1, 0), Err(Error::Parameter(_))));
        assert!(matches!(gen_blobs(5, 3, 0.1, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn split_is_stratified_disjoint_and_reproducible() {
        let d = gen_two_moons(200, 0.1, 1).unwrap();
        let spec = SplitSpec {
            labeled_per_class: 2,
            seed: 11,
            test_fraction: 0.25,
        };
        let s = make_ssl_split(&d, &spec).unwrap();
        assert_eq!(s.labeled.len(), 4);
        assert_eq!(s.labeled.labels.iter().filter(|&&l| l == 0).count(), 2);
        assert_eq!(s.test.len(), 50);
        let mut all: Vec<usize> = s
            .labeled
            .indices
            .iter()
            .chain(&s.unlabeled.indices)
            .chain(&s.test.indices)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 200);
        assert_eq!(s, make_ssl_split(&d, &spec).unwrap());

        let bad = SplitSpec {
            labeled_per_class: 100,
            ..spec
        };
        assert!(matches!(make_ssl_split(&d, &bad), Err(Error::Parameter(_))));
    }

    #[test]
    fn batch_sizes_follow_mu() {
        let mut s = BatchSampler::new(4, 1000, 64, 7, 0).unwrap();
        let b = s.batch(0);
        assert_eq!((b.labeled.len(), b.unlabeled.len()), (64, 448));
        let mut s = BatchSampler::new(1, 1, 1, 1, 0).unwrap();
        let b = s.batch(5);
        assert_eq!((b.labeled, b.unlabeled), (vec![0], vec![0]));
        assert!(matches!(BatchSampler::new(0, 10, 1, 1, 0), Err(Error::State(_))));
    }

    #[test]
    fn unlabeled_epoch_covers_each_index_once() {
        let mut s = BatchSampler::new(3, 30, 2, 3, 9).unwrap();
        let seen: Vec<usize> = s.iter().take(5).flat_map(|b| b.unlabeled).collect();
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        let mut again = BatchSampler::new(3, 30, 2, 3, 9).unwrap();
        assert_eq!(again.batch(3), s.batch(3));
    }
}
