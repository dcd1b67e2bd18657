//! Training flags shared by `train`, `retrain` and `imbalance`, and their
//! resolution into a dataset source plus a training configuration.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use selflabel::data::{load_features, make_blobs, BlobSpec, Dataset};
use selflabel::io::read_labels_csv;
use selflabel::model::Trunk;
use selflabel::pipeline::{Method, TrainConfig};
use selflabel::Labeling;

use crate::exit::{usage, CliResult};

/// Every field is optional so that a JSON config file can supply it; an
/// explicit flag always wins over the file.
#[derive(Args, Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainOpts {
    /// Synthetic Gaussian blobs: `k=4,n=2000,sep=8` plus optional `d=16`,
    /// `sigma=1`, `seed=<seed>`, `nuisance=0`, `nuisance-std=0`.
    #[arg(long)]
    pub blobs: Option<String>,
    /// N x D feature matrix (SLFM or CSV) instead of blobs.
    #[arg(long, conflicts_with = "blobs")]
    pub features: Option<PathBuf>,
    /// `index,label` truth file for --features.
    #[arg(long, requires = "features")]
    pub truth: Option<PathBuf>,
    /// Fraction of rows held out as a test split [default: 0, or 0.3 for imbalance].
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Number of heads T [default: 1].
    #[arg(long)]
    pub heads: Option<usize>,
    /// Labels per head K [default: number of truth classes].
    #[arg(long)]
    pub labels: Option<usize>,
    /// Total training epochs [default: 80].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of label optimizations M [default: 4].
    #[arg(long)]
    pub opts: Option<usize>,
    /// Sinkhorn lambda [default: 25].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sinkhorn marginal tolerance [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Sinkhorn iteration cap [default: 2000].
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// sinkhorn | exact-oracle | kmeans | unconstrained | supervised [default: sinkhorn].
    #[arg(long)]
    pub method: Option<String>,
    /// Augmented samples averaged per relabelling [default: 16].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Augmentation noise std [default: 2].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Augmentation coordinate dropout rate [default: 0.5].
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Probability that a sampled augmentation is the identity [default: 0].
    #[arg(long)]
    pub identity_prob: Option<f64>,
    /// Augment training minibatches too [default: true].
    #[arg(long)]
    pub augment_training: Option<bool>,
    /// Hidden trunk width; 0 uses the raw features [default: 32].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Initial learning rate [default: 0.05].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 128].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight decay [default: 5e-3].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// SGD momentum [default: 0.9].
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Master seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! overlay {
    ($a:ident, $b:ident, $($f:ident),*) => {
        TrainOpts { $($f: $a.$f.or($b.$f)),* }
    };
}

impl TrainOpts {
    /// Fields set here win; the rest come from `file`.
    pub fn over(self, file: TrainOpts) -> TrainOpts {
        let (a, b) = (self, file);
        overlay!(
            a, b, blobs, features, truth, test_fraction, heads, labels, epochs, opts, lambda, tol, max_iter,
            method, samples, noise, dropout, identity_prob, augment_training, hidden, lr, batch_size,
            weight_decay, momentum, seed
        )
    }

    pub fn with_config(self, config: Option<&Path>) -> CliResult<TrainOpts> {
        match config {
            None => Ok(self),
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                let file: TrainOpts = serde_json::from_str(&text)
                    .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
                Ok(self.over(file))
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn data_source(&self) -> CliResult<DataSource> {
        let test_fraction = self.test_fraction.unwrap_or(0.0);
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(usage("--test-fraction must lie in [0, 1)"));
        }
        let blobs = match (&self.blobs, &self.features) {
            (Some(_), Some(_)) => return Err(usage("--blobs and --features are exclusive")),
            (None, None) => return Err(usage("need --blobs or --features")),
            (Some(text), None) => Some(parse_blobs(text, self.seed())?),
            (None, Some(_)) => None,
        };
        Ok(DataSource {
            blobs,
            features: self.features.clone(),
            truth: self.truth.clone(),
            test_fraction,
            split_seed: self.seed(),
        })
    }

    /// Resolves the training configuration; `classes` is the truth class count, if known.
    pub fn train_config(&self, classes: Option<usize>) -> CliResult<TrainConfig> {
        let k = match (self.labels, classes) {
            (Some(k), _) => k,
            (None, Some(c)) => c,
            (None, None) => return Err(usage("--labels is required without truth labels")),
        };
        let method = match &self.method {
            Some(m) => m.parse::<Method>().map_err(|e| usage(e.to_string()))?,
            None => Method::Sinkhorn,
        };
        let mut cfg = TrainConfig::desk(
            k,
            self.heads.unwrap_or(1),
            self.epochs.unwrap_or(80),
            self.opts.unwrap_or(4),
            self.seed(),
        );
        cfg.method = method;
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.tol {
            cfg.sinkhorn_tolerance = v;
        }
        if let Some(v) = self.max_iter {
            cfg.sinkhorn_max_iterations = v;
        }
        if let Some(v) = self.samples {
            cfg.augmentation_samples = v;
        }
        if let Some(v) = self.noise {
            cfg.augmentation.noise_std = v;
        }
        if let Some(v) = self.dropout {
            cfg.augmentation.dropout = v;
        }
        if let Some(v) = self.identity_prob {
            cfg.augmentation.p_identity = v;
        }
        if let Some(v) = self.augment_training {
            cfg.augment_training = v;
        }
        match self.hidden {
            Some(0) => cfg.trunk = Trunk::Identity,
            Some(width) => cfg.trunk = Trunk::Hidden { width },
            None => {}
        }
        if let Some(v) = self.lr {
            cfg.sgd.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.sgd.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.sgd.weight_decay = v;
        }
        if let Some(v) = self.momentum {
            cfg.sgd.momentum = v;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Where a run's data came from; enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub blobs: Option<BlobSpec>,
    pub features: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl DataSource {
    pub fn load(&self) -> CliResult<Dataset> {
        let data = match (&self.blobs, &self.features) {
            (Some(spec), _) => make_blobs(spec)?,
            (None, Some(path)) => {
                let features = load_features(path)?;
                let truth = match &self.truth {
                    Some(t) => Some(Labeling::from_labels(read_labels_csv(std::fs::File::open(t)?)?)),
                    None => None,
                };
                Dataset::new(features, truth, format!("features {}", path.display()))?
            }
            (None, None) => return Err(usage("data source names neither blobs nor features")),
        };
        if self.test_fraction > 0.0 {
            Ok(data.with_test_split(self.test_fraction, self.split_seed)?)
        } else {
            Ok(data)
        }
    }
}

/// Parses `key=value` pairs into a blob spec.
pub fn parse_blobs(text: &str, default_seed: u64) -> CliResult<BlobSpec> {
    let (mut k, mut n, mut sep) = (None, None, None);
    let mut spec = BlobSpec::balanced(1, 1, 16, 1.0, default_seed);
    for pair in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("blob field {pair:?} is not key=value")))?;
        let bad = |what: &str| usage(format!("blob field {key}: {value:?} is not {what}"));
        let int = || value.trim().parse::<usize>().map_err(|_| bad("an integer"));
        let float = || value.trim().parse::<f64>().map_err(|_| bad("a number"));
        match key.trim() {
            "k" => k = Some(int()?),
            "n" => n = Some(int()?),
            "sep" | "separation" => sep = Some(float()?),
            "d" | "dim" => spec.dim = int()?,
            "sigma" => spec.sigma = float()?,
            "seed" => spec.seed = value.trim().parse().map_err(|_| bad("an integer"))?,
            "nuisance" => spec.nuisance_dims = int()?,
            "nuisance-std" => spec.nuisance_std = float()?,
            other => return Err(usage(format!("unknown blob field {other:?}"))),
        }
    }
    let (Some(k), Some(n), Some(sep)) = (k, n, sep) else {
        return Err(usage("--blobs needs k, n and sep"));
    };
    if k == 0 || n < k {
        return Err(usage("--blobs needs 1 <= k <= n"));
    }
    let balanced = BlobSpec::balanced(k, n, spec.dim, sep, spec.seed);
    let spec = BlobSpec {
        counts: balanced.counts,
        separation: sep,
        ..spec
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}
