//! Datasets: synthetic Gaussian blobs, ingestion, train/test splits, class
//! imbalance, feature-space augmentations and frozen-feature evaluators.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::io::{read_labels_csv, read_matrix_file, write_labels_csv, write_slfm};
use crate::matrix::FeatureMatrix;
use crate::metrics::Labeling;
use crate::model::{sgd_epoch, Architecture, ClassifierModel, HeadTarget, SgdConfig, SgdState, Trunk};
use crate::ot::{argmax_lowest, HardAssignment, LogPredictionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: FeatureMatrix,
    truth: Option<Labeling>,
    split: Vec<Split>,
    provenance: String,
}

impl Dataset {
    /// All rows start tagged as training rows.
    pub fn new(features: FeatureMatrix, truth: Option<Labeling>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(t) = &truth {
            check_dim("truth length", features.rows(), t.len())?;
        }
        let split = vec![Split::Train; features.rows()];
        Ok(Self {
            features,
            truth,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn truth(&self) -> Option<&Labeling> {
        self.truth.as_ref()
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Per-class row counts of the truth labelling.
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.truth.as_ref().map(Labeling::counts)
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Rows at `indices`, in order, with their truth and split tags.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            truth: self.truth.as_ref().map(|t| {
                Labeling::new(indices.iter().map(|&i| t.labels()[i]).collect(), t.k())
                    .expect("labels of a subset stay in range")
            }),
            split: indices.iter().map(|&i| self.split[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn part(&self, split: Split) -> Self {
        self.subset(&self.indices_of(split))
    }

    /// Tags a seeded `test_fraction` of rows as test rows, stratified by truth when present.
    pub fn with_test_split(mut self, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(invalid("test fraction must lie in [0, 1)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<Vec<usize>> = match &self.truth {
            Some(t) => {
                let mut g = vec![Vec::new(); t.k()];
                for (i, &y) in t.labels().iter().enumerate() {
                    g[y].push(i);
                }
                g
            }
            None => vec![(0..self.len()).collect()],
        };
        self.split.iter_mut().for_each(|s| *s = Split::Train);
        for mut g in groups {
            g.shuffle(&mut rng);
            let take = (test_fraction * g.len() as f64).round() as usize;
            for &i in &g[..take] {
                self.split[i] = Split::Test;
            }
        }
        Ok(self)
    }
}

/// Dataset manifest stored next to the features and labels files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    pub k_true: Option<usize>,
    pub seed: Option<u64>,
    pub provenance: String,
}

/// Writes `features.slfm`, `labels.csv` (when truth is present) and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_slfm(
        BufWriter::new(File::create(dir.join("features.slfm"))?),
        data.len(),
        data.dim(),
        data.features.as_slice(),
    )?;
    if let Some(t) = &data.truth {
        write_labels_csv(File::create(dir.join("labels.csv"))?, t.labels())?;
    }
    let manifest = DatasetManifest {
        n: data.len(),
        d: data.dim(),
        k_true: data.truth.as_ref().map(Labeling::k),
        seed,
        provenance: data.provenance.clone(),
    };
    serde_json::to_writer_pretty(File::create(dir.join("manifest.json"))?, &manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    let features = load_features(&dir.join("features.slfm"))?;
    let truth = match manifest.k_true {
        Some(k) => Some(Labeling::new(read_labels_csv(File::open(dir.join("labels.csv"))?)?, k)?),
        None => None,
    };
    Dataset::new(features, truth, manifest.provenance)
}

/// Reads an `N x D` feature matrix from an SLFM or CSV file.
pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    let raw = read_matrix_file(path)?;
    FeatureMatrix::new(raw.rows, raw.cols, raw.values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    /// Points per cluster; its length is the number of clusters.
    pub counts: Vec<usize>,
    pub dim: usize,
    /// Minimum distance between cluster centres in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Extra class-independent coordinates appended to every row.
    #[serde(default)]
    pub nuisance_dims: usize,
    /// Std of the nuisance coordinates.
    #[serde(default)]
    pub nuisance_std: f64,
    pub seed: u64,
}

impl BlobSpec {
    /// `n` points split as evenly as possible over `k` clusters, unit `sigma`.
    pub fn balanced(k: usize, n: usize, dim: usize, separation: f64, seed: u64) -> Self {
        let counts = (0..k).map(|c| n / k + usize::from(c < n % k)).collect();
        Self {
            counts,
            dim,
            separation,
            sigma: 1.0,
            nuisance_dims: 0,
            nuisance_std: 0.0,
            seed,
        }
    }

    /// Appends `dims` class-independent Gaussian coordinates of std `std`.
    pub fn with_nuisance(self, dims: usize, std: f64) -> Self {
        Self {
            nuisance_dims: dims,
            nuisance_std: std,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.iter().any(|&c| c == 0) {
            return Err(invalid("every cluster needs a positive count"));
        }
        if self.dim == 0 {
            return Err(invalid("dimension must be positive"));
        }
        if !(self.separation > 0.0 && self.sigma > 0.0 && self.separation.is_finite() && self.sigma.is_finite()) {
            return Err(invalid("separation and sigma must be positive"));
        }
        if !(self.nuisance_std >= 0.0 && self.nuisance_std.is_finite()) {
            return Err(invalid("nuisance std must be nonnegative"));
        }
        Ok(())
    }
}

/// Isotropic Gaussian clusters around seeded random centres whose closest
/// pair sits exactly `separation * sigma` apart. Rows are shuffled.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.counts.len();
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers: Vec<f64> = (0..k * d).map(|_| rng.sample(StandardNormal)).collect();
    if k > 1 {
        let mut min_dist = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let dist = (0..d)
                    .map(|j| (centers[a * d + j] - centers[b * d + j]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        let scale = spec.separation * spec.sigma / min_dist;
        centers.iter_mut().for_each(|c| *c *= scale);
    }
    let n: usize = spec.counts.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut values = vec![0.0; n * d];
    let mut labels = vec![0; n];
    let mut next = 0;
    for (c, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            let row = order[next];
            next += 1;
            labels[row] = c;
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                values[row * d + j] = centers[c * d + j] + spec.sigma * noise;
            }
        }
    }
    let extra = spec.nuisance_dims;
    if extra > 0 {
        let mut nuisance_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6E75_6973_616E_6365);
        let mut wide = Vec::with_capacity(n * (d + extra));
        for row in values.chunks_exact(d) {
            wide.extend_from_slice(row);
            for _ in 0..extra {
                let z: f64 = nuisance_rng.sample(StandardNormal);
                wide.push(spec.nuisance_std * z);
            }
        }
        values = wide;
    }
    let features = FeatureMatrix::new(n, d + extra, values)?;
    let provenance = format!(
        "blobs k={k} n={n} d={d} separation={} sigma={} nuisance={}x{} seed={}",
        spec.separation, spec.sigma, extra, spec.nuisance_std, spec.seed
    );
    Dataset::new(features, Some(Labeling::new(labels, k)?), provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceMode {
    Full,
    /// Half of class 0 is removed.
    Light,
    /// Class `k` keeps `(k + 1) * 10%` of its rows, capped at 100%.
    Heavy,
}

impl std::str::FromStr for ImbalanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "light" => Ok(Self::Light),
            "heavy" => Ok(Self::Heavy),
            other => Err(invalid(format!("unknown imbalance mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ImbalanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Light => "light",
            Self::Heavy => "heavy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub mode: ImbalanceMode,
    pub retention: Vec<f64>,
}

impl ImbalanceSpec {
    pub fn new(mode: ImbalanceMode, classes: usize) -> Self {
        let retention = (0..classes)
            .map(|c| match mode {
                ImbalanceMode::Full => 1.0,
                ImbalanceMode::Light => {
                    if c == 0 {
                        0.5
                    } else {
                        1.0
                    }
                }
                ImbalanceMode::Heavy => ((c + 1) as f64 * 0.1).min(1.0),
            })
            .collect();
        Self { mode, retention }
    }
}

/// Seeded per-class subsampling of the training rows to the retention
/// fractions; test rows are kept. Surviving rows keep their original order.
pub fn apply_imbalance(data: &Dataset, spec: &ImbalanceSpec, seed: u64) -> Result<Dataset> {
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| invalid("imbalance needs truth labels"))?;
    check_dim("retention fractions", truth.k(), spec.retention.len())?;
    if spec.retention.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(invalid("retention fractions must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; data.len()];
    for c in 0..truth.k() {
        let mut rows: Vec<usize> = (0..data.len())
            .filter(|&i| truth.labels()[i] == c)
            .filter(|&i| {
                if data.split[i] == Split::Test {
                    keep[i] = true;
                    false
                } else {
                    true
                }
            })
            .collect();
        rows.shuffle(&mut rng);
        let count = ((spec.retention[c] * rows.len() as f64).round() as usize).clamp(1.min(rows.len()), rows.len());
        for &i in &rows[..count] {
            keep[i] = true;
        }
    }
    let kept: Vec<usize> = (0..data.len()).filter(|&i| keep[i]).collect();
    let mut out = data.subset(&kept);
    out.provenance = format!("{} imbalance={}", data.provenance, spec.mode);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Std of the additive Gaussian noise.
    pub noise_std: f64,
    /// Probability of zeroing each coordinate.
    pub dropout: f64,
    /// Probability that a sampled transform is the identity.
    pub p_identity: f64,
}

impl TransformConfig {
    pub const IDENTITY: Self = Self {
        noise_std: 0.0,
        dropout: 0.0,
        p_identity: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && prob(self.dropout) && prob(self.p_identity)) {
            return Err(invalid("noise std must be nonnegative; dropout and identity probability in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            noise_std: 2.0,
            dropout: 0.5,
            p_identity: 0.0,
        }
    }
}

/// A sampled feature transform `x -> mask * (x + noise)`. Its randomness is
/// fixed by a seed, so applying it twice to the same input gives the same output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTransform {
    config: TransformConfig,
    identity: bool,
    seed: u64,
}

impl FeatureTransform {
    pub fn is_identity(&self) -> bool {
        self.identity || (self.config.noise_std == 0.0 && self.config.dropout == 0.0)
    }

    pub fn apply(&self, x: &FeatureMatrix) -> FeatureMatrix {
        if self.is_identity() {
            return x.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out = x.clone();
        let TransformConfig { noise_std, dropout, .. } = self.config;
        for i in 0..out.rows() {
            for v in out.row_mut(i) {
                let noise: f64 = rng.sample(StandardNormal);
                let dropped = dropout > 0.0 && rng.random::<f64>() < dropout;
                *v = if dropped { 0.0 } else { *v + noise_std * noise };
            }
        }
        out
    }
}

/// Seeded stream of random feature transforms.
#[derive(Debug, Clone)]
pub struct TransformSampler {
    config: TransformConfig,
    rng: ChaCha8Rng,
}

impl TransformSampler {
    pub fn new(config: TransformConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &TransformConfig {
        &self.config
    }

    pub fn sample(&mut self) -> FeatureTransform {
        let identity = self.config.p_identity > 0.0 && self.rng.random::<f64>() < self.config.p_identity;
        FeatureTransform {
            config: self.config,
            identity,
            seed: self.rng.random(),
        }
    }
}

/// Per head, the average of log-softmax outputs over `samples` sampled
/// transforms of `x`, renormalized per column.
pub fn augmented_log_predictions(
    model: &ClassifierModel,
    x: &FeatureMatrix,
    sampler: &mut TransformSampler,
    samples: usize,
) -> Result<Vec<LogPredictionMatrix>> {
    if samples == 0 {
        return Err(invalid("need at least one augmentation sample"));
    }
    let mut sums: Option<Vec<Vec<f64>>> = None;
    for _ in 0..samples {
        let t = sampler.sample();
        let out = if t.is_identity() {
            model.forward_raw(x)?
        } else {
            model.forward_raw(&t.apply(x))?
        };
        match &mut sums {
            None => sums = Some(out),
            Some(acc) => {
                for (a, o) in acc.iter_mut().zip(&out) {
                    a.iter_mut().zip(o).for_each(|(s, v)| *s += v);
                }
            }
        }
    }
    let inv = 1.0 / samples as f64;
    sums.unwrap()
        .into_iter()
        .zip(&model.architecture().heads)
        .map(|(mut cols, &k)| {
            if samples > 1 {
                cols.iter_mut().for_each(|v| *v *= inv);
            }
            LogPredictionMatrix::from_columns(k, x.rows(), cols)
        })
        .collect()
}

fn check_eval_inputs(train: &FeatureMatrix, train_labels: &[usize], test: &FeatureMatrix, test_labels: &[usize]) -> Result<()> {
    check_dim("train labels", train.rows(), train_labels.len())?;
    check_dim("test labels", test.rows(), test_labels.len())?;
    check_dim("test feature dimension", train.cols(), test.cols())?;
    if test.rows() == 0 {
        return Err(invalid("empty test set"));
    }
    Ok(())
}

pub const KNN_NEIGHBOURS: usize = 50;
pub const KNN_TEMPERATURE: f64 = 0.1;

/// Weighted kNN accuracy on cosine similarity: each of the `k` nearest
/// training embeddings votes `exp(cos / sigma)` for its label. Embeddings are
/// L2-normalized here, so callers may pass raw features.
pub fn weighted_knn_eval(
    train: &FeatureMatrix,
    train_labels: &[usize],
    test: &FeatureMatrix,
    test_labels: &[usize],
    k: usize,
    sigma: f64,
) -> Result<f64> {
    check_eval_inputs(train, train_labels, test, test_labels)?;
    if k == 0 || k > train.rows() {
        return Err(invalid(format!("k = {k} must lie in 1..={}", train.rows())));
    }
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    let train = train.l2_normalized();
    let test = test.l2_normalized();
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let correct: usize = (0..test.rows())
        .into_par_iter()
        .map(|t| {
            let q = test.row(t);
            let mut sims: Vec<(f64, usize)> = (0..train.rows())
                .map(|i| (train.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k < sims.len() {
                sims.select_nth_unstable_by(k - 1, by_sim);
                sims.truncate(k);
            }
            // Shift by the best similarity so small sigma cannot overflow.
            let top = sims.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
            let mut scores = vec![0.0; classes];
            for &(s, i) in &sims {
                scores[train_labels[i]] += ((s - top) / sigma).exp();
            }
            usize::from(argmax_lowest(&scores) == test_labels[t])
        })
        .sum();
    Ok(correct as f64 / test.rows() as f64)
}

/// SGD settings used by the linear probe.
pub fn probe_config(seed: u64) -> SgdConfig {
    SgdConfig {
        batch_size: 64,
        ..SgdConfig::desk_defaults(30, seed)
    }
}

/// Fits one affine softmax head on standardized frozen features and returns
/// its test accuracy.
pub fn linear_probe_eval(
    train: &FeatureMatrix,
    train_labels: &[usize],
    test: &FeatureMatrix,
    test_labels: &[usize],
    config: &SgdConfig,
) -> Result<f64> {
    check_eval_inputs(train, train_labels, test, test_labels)?;
    if train.rows() == 0 {
        return Err(invalid("empty training set"));
    }
    let d = train.cols();
    let n = train.rows() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in 0..train.rows() {
        train.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v / n);
    }
    for i in 0..train.rows() {
        for j in 0..d {
            std[j] += (train.row(i)[j] - mean[j]).powi(2) / n;
        }
    }
    std.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let standardize = |x: &FeatureMatrix| {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
        out
    };
    let train = standardize(train);
    let test = standardize(test);
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);
    let targets = HardAssignment::new(train_labels.to_vec(), classes)?;
    let arch = Architecture::new(d, Trunk::Identity, vec![classes])?;
    let mut model = ClassifierModel::new(arch, config.seed)?;
    let mut state = SgdState::new(&model);
    for epoch in 0..config.epochs {
        sgd_epoch(&mut model, &mut state, &train, &[HeadTarget::Hard(&targets)], config, epoch, None)?;
    }
    let log_p = &model.forward(&test)?[0];
    let correct = (0..test.rows())
        .filter(|&i| log_p.argmax(i) == test_labels[i])
        .count();
    Ok(correct as f64 / test.rows() as f64)
}
