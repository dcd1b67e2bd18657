//! Alternating self-labelling driver: cross-entropy training against the
//! current labels, interleaved at scheduled epochs with a relabelling step
//! (balanced transport, exact assignment, K-means or plain argmax).

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{kmeans, unconstrained_self_label};
use crate::data::{
    apply_imbalance, augmented_log_predictions, linear_probe_eval, make_blobs, probe_config, weighted_knn_eval,
    BlobSpec, Dataset, ImbalanceMode, ImbalanceSpec, Split, TransformConfig, TransformSampler, KNN_NEIGHBOURS,
    KNN_TEMPERATURE,
};
use crate::error::{invalid, Result};
use crate::metrics::{adjusted_nmi, adjusted_rand, entropy_of_counts, nmi, Labeling};
use crate::model::{sgd_epoch, Architecture, ClassifierModel, HeadTarget, SgdConfig, SgdState, Trunk};
use crate::oracle::{assignment_cost, solve_exact};
use crate::ot::{equipartition_capacities, HardAssignment, Marginals};
use crate::sinkhorn::{round_to_hard, sinkhorn_solve, ScalingState, SinkhornConfig};

/// Epochs (1-based) before whose gradient pass labels are re-optimized:
/// `round(total * (i / (M - 1))^2)` for `i = 0..M`, without epoch 0 and
/// duplicates. A single optimization is placed mid-training.
pub fn schedule_opt_epochs(opts: usize, total_epochs: usize) -> Result<Vec<usize>> {
    if total_epochs == 0 {
        return Err(invalid("total epochs must be positive"));
    }
    match opts {
        0 => Ok(Vec::new()),
        1 => Ok(vec![((total_epochs as f64 / 2.0).round() as usize).max(1)]),
        m => {
            let mut epochs: Vec<usize> = (0..m)
                .map(|i| {
                    let t = (i as f64 / (m - 1) as f64).powi(2);
                    (t * total_epochs as f64).round() as usize
                })
                .filter(|&e| e > 0)
                .collect();
            epochs.dedup();
            Ok(epochs)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Balanced labels from the entropic transport solve.
    Sinkhorn,
    /// Balanced labels from the exact assignment solver; small N only.
    ExactOracle,
    /// K-means clusters of the trunk features.
    #[serde(rename = "kmeans")]
    KMeans,
    /// Per-point argmax with no balance constraint.
    Unconstrained,
    /// Fixed truth labels, no relabelling.
    Supervised,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sinkhorn => "sinkhorn",
            Self::ExactOracle => "exact-oracle",
            Self::KMeans => "kmeans",
            Self::Unconstrained => "unconstrained",
            Self::Supervised => "supervised",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinkhorn" => Ok(Self::Sinkhorn),
            "exact-oracle" | "exact" => Ok(Self::ExactOracle),
            "kmeans" => Ok(Self::KMeans),
            "unconstrained" => Ok(Self::Unconstrained),
            "supervised" => Ok(Self::Supervised),
            other => Err(invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Labels per head.
    pub k: usize,
    pub heads: usize,
    pub trunk: Trunk,
    pub lambda: f64,
    pub sinkhorn_tolerance: f64,
    pub sinkhorn_max_iterations: usize,
    /// Number of label optimizations `M`.
    pub opts: usize,
    pub sgd: SgdConfig,
    /// Transforms used both for training batches and for averaged predictions.
    pub augmentation: TransformConfig,
    /// Augment training minibatches as well as the relabelling predictions.
    pub augment_training: bool,
    /// Transforms averaged per relabelling step.
    pub augmentation_samples: usize,
    pub method: Method,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for `[k x heads]` over `epochs` epochs, tuned on
    /// unit-variance Gaussian clusters.
    pub fn desk(k: usize, heads: usize, epochs: usize, opts: usize, seed: u64) -> Self {
        Self {
            k,
            heads,
            trunk: Trunk::Hidden { width: 32 },
            lambda: 25.0,
            sinkhorn_tolerance: 1e-6,
            sinkhorn_max_iterations: 2000,
            opts,
            sgd: SgdConfig {
                weight_decay: 5e-3,
                ..SgdConfig::desk_defaults(epochs, seed)
            },
            augmentation: TransformConfig::default(),
            augment_training: true,
            augmentation_samples: 16,
            method: Method::Sinkhorn,
            seed,
        }
    }

    pub fn epochs(&self) -> usize {
        self.sgd.epochs
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            lambda: self.lambda,
            tolerance: self.sinkhorn_tolerance,
            max_iterations: self.sinkhorn_max_iterations,
            ..SinkhornConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.heads == 0 {
            return Err(invalid("need at least one head with at least one label"));
        }
        if self.augmentation_samples == 0 {
            return Err(invalid("augmentation samples must be at least 1"));
        }
        if self.sgd.epochs == 0 {
            return Err(invalid("need at least one epoch"));
        }
        self.sgd.validate()?;
        self.sinkhorn().validate()?;
        self.augmentation.validate()
    }
}

/// Independent sub-seed for one consumer of the master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded uniformly random assignment with equipartition counts.
pub fn random_balanced_labels(points: usize, classes: usize, seed: u64) -> Result<HardAssignment> {
    let caps = equipartition_capacities(classes, points)?;
    let mut labels: Vec<usize> = caps
        .iter()
        .enumerate()
        .flat_map(|(y, &c)| std::iter::repeat(y).take(c))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    HardAssignment::new(labels, classes)
}

/// One head's relabelling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelUpdate {
    pub head: usize,
    /// Transport cost of the hard labels under the step's predictions, before and after.
    pub objective_before: f64,
    pub objective_after: f64,
    /// Cost of the soft plan, for the transport solve only.
    pub transport_cost: Option<f64>,
    pub marginal_violation: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub warm_started: Option<bool>,
    /// `max_y | count_y - N/K |` of the new labels, in points.
    pub balance_deviation: usize,
    pub nmi_previous: f64,
}

/// Per-epoch series; vectors are indexed by head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean minibatch cross-entropy, summed over heads.
    pub ce_loss: f64,
    /// Transport cost of the current labels under the model after this epoch.
    pub transport_cost: Vec<f64>,
    pub nmi_truth: Option<Vec<f64>>,
    pub ami_truth: Option<Vec<f64>>,
    pub ari_truth: Option<Vec<f64>>,
    /// Label-histogram entropy in nats.
    pub label_entropy: Vec<f64>,
    /// Share of the points carried by the most populous label.
    pub label_max_share: Vec<f64>,
    pub label_updates: Vec<LabelUpdate>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub schedule: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// One JSON object per epoch, one per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn label_updates(&self) -> impl Iterator<Item = &LabelUpdate> {
        self.epochs.iter().flat_map(|e| e.label_updates.iter())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub labels: Vec<HardAssignment>,
    pub record: RunRecord,
}

impl TrainOutcome {
    /// NMI between head 0's final labels and the data's truth.
    pub fn final_nmi(&self, data: &Dataset) -> Option<f64> {
        let truth = data.truth()?;
        nmi(&Labeling::from(&self.labels[0]), truth).ok()
    }
}

enum Relabel {
    Fixed,
    By(Method),
}

struct Relabeller {
    sinkhorn: SinkhornConfig,
    warm: Vec<Option<ScalingState>>,
    sampler: TransformSampler,
    samples: usize,
    k: usize,
    seed: u64,
    steps: u64,
}

impl Relabeller {
    fn step(
        &mut self,
        method: Method,
        model: &ClassifierModel,
        data: &Dataset,
        labels: &mut [HardAssignment],
    ) -> Result<Vec<LabelUpdate>> {
        let x = data.features();
        let n = x.rows();
        let log_ps = augmented_log_predictions(model, x, &mut self.sampler, self.samples)?;
        let clusters = if method == Method::KMeans {
            let feats = model.embed(x)?;
            let seed = derive_seed(self.seed, 1000 + self.steps);
            Some(kmeans(&feats, self.k, seed, 100, 1e-8)?)
        } else {
            None
        };
        self.steps += 1;
        let marginals = Marginals::equipartition(self.k, n)?;
        let mut updates = Vec::with_capacity(labels.len());
        for (head, (log_p, current)) in log_ps.iter().zip(labels.iter_mut()).enumerate() {
            let before = assignment_cost(log_p, current.labels());
            let mut update = LabelUpdate {
                head,
                objective_before: before,
                objective_after: before,
                transport_cost: None,
                marginal_violation: None,
                iterations: None,
                converged: None,
                warm_started: None,
                balance_deviation: 0,
                nmi_previous: 1.0,
            };
            let next = match method {
                Method::Sinkhorn => {
                    let (plan, state, diag) =
                        sinkhorn_solve(log_p, &marginals, &self.sinkhorn, self.warm[head].as_ref())?;
                    self.warm[head] = Some(state);
                    update.transport_cost = Some(diag.transport_cost);
                    update.marginal_violation = Some(diag.final_marginal_violation);
                    update.iterations = Some(diag.iterations_run);
                    update.converged = Some(diag.converged);
                    update.warm_started = Some(diag.warm_started);
                    round_to_hard(&plan)
                }
                Method::ExactOracle => solve_exact(log_p, &marginals)?.0,
                Method::KMeans => {
                    let c = clusters.as_ref().expect("clusters computed for K-means");
                    HardAssignment::new(c.assignments.labels().to_vec(), self.k)?
                }
                Method::Unconstrained => unconstrained_self_label(log_p),
                Method::Supervised => unreachable!("supervised runs never relabel"),
            };
            update.objective_after = assignment_cost(log_p, next.labels());
            update.balance_deviation = next.balance_deviation();
            update.nmi_previous = nmi(&Labeling::from(&*current), &Labeling::from(&next))?;
            *current = next;
            updates.push(update);
        }
        Ok(updates)
    }
}

fn train_loop(data: &Dataset, cfg: &TrainConfig, initial: Vec<HardAssignment>, relabel: Relabel) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let x = data.features();
    let head_sizes: Vec<usize> = initial.iter().map(HardAssignment::classes).collect();
    let arch = Architecture::new(x.cols(), cfg.trunk, head_sizes)?;
    let mut model = ClassifierModel::new(arch, derive_seed(cfg.seed, 1))?;
    let mut state = SgdState::new(&model);
    let mut sgd = cfg.sgd.clone();
    sgd.seed = derive_seed(cfg.seed, 2);
    let mut train_sampler = TransformSampler::new(cfg.augmentation, derive_seed(cfg.seed, 3))?;
    let mut relabeller = Relabeller {
        sinkhorn: cfg.sinkhorn(),
        warm: vec![None; initial.len()],
        sampler: TransformSampler::new(cfg.augmentation, derive_seed(cfg.seed, 4))?,
        samples: cfg.augmentation_samples,
        k: cfg.k,
        seed: cfg.seed,
        steps: 0,
    };
    let schedule = match relabel {
        Relabel::Fixed => Vec::new(),
        Relabel::By(_) => schedule_opt_epochs(cfg.opts, cfg.epochs())?,
    };
    let mut labels = initial;
    let truth = data.truth();
    let started = Instant::now();
    let mut epochs = Vec::with_capacity(cfg.epochs());
    for epoch in 1..=cfg.epochs() {
        let mut label_updates = Vec::new();
        if let Relabel::By(method) = relabel {
            if schedule.contains(&epoch) {
                label_updates = relabeller.step(method, &model, data, &mut labels)?;
            }
        }
        let targets: Vec<HeadTarget<'_>> = labels.iter().map(HeadTarget::Hard).collect();
        let augment = cfg.augment_training.then_some(&mut train_sampler);
        let ce_loss = sgd_epoch(&mut model, &mut state, x, &targets, &sgd, epoch - 1, augment)?;

        let log_ps = model.forward(x)?;
        let transport_cost = log_ps
            .iter()
            .zip(&labels)
            .map(|(lp, a)| assignment_cost(lp, a.labels()))
            .collect();
        let per_head = |f: fn(&Labeling, &Labeling) -> Result<f64>| -> Result<Option<Vec<f64>>> {
            truth
                .map(|t| labels.iter().map(|a| f(&Labeling::from(a), t)).collect())
                .transpose()
        };
        epochs.push(EpochRecord {
            epoch,
            ce_loss,
            transport_cost,
            nmi_truth: per_head(nmi)?,
            ami_truth: per_head(adjusted_nmi)?,
            ari_truth: per_head(adjusted_rand)?,
            label_entropy: labels.iter().map(|a| entropy_of_counts(a.counts())).collect(),
            label_max_share: labels.iter().map(HardAssignment::max_share).collect(),
            label_updates,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        model,
        labels,
        record: RunRecord {
            config: cfg.clone(),
            schedule,
            epochs,
            checkpoint: None,
        },
    })
}

/// Alternates training against the current labels with relabelling at the
/// scheduled epochs. Labels start as a seeded random balanced assignment per
/// head, or as the truth for the supervised method.
pub fn self_label_train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.method == Method::Supervised {
        let truth = data
            .truth()
            .ok_or_else(|| invalid("supervised training needs truth labels"))?;
        let labels = HardAssignment::new(truth.labels().to_vec(), truth.k())?;
        return train_loop(data, cfg, vec![labels; cfg.heads], Relabel::Fixed);
    }
    if cfg.method == Method::ExactOracle && data.len() > crate::oracle::MAX_EXACT_POINTS {
        return Err(invalid("exact relabelling is limited to small datasets"));
    }
    let initial = (0..cfg.heads)
        .map(|h| random_balanced_labels(data.len(), cfg.k, derive_seed(cfg.seed, 100 + h as u64)))
        .collect::<Result<Vec<_>>>()?;
    train_loop(data, cfg, initial, Relabel::By(cfg.method))
}

/// Trains a fresh model on fixed labels, with no relabelling.
pub fn retrain_from_labels(data: &Dataset, labels: &[HardAssignment], cfg: &TrainConfig) -> Result<TrainOutcome> {
    if labels.is_empty() {
        return Err(invalid("need labels for at least one head"));
    }
    for a in labels {
        crate::error::check_dim("label count", data.len(), a.len())?;
    }
    train_loop(data, cfg, labels.to_vec(), Relabel::Fixed)
}

/// Weighted kNN and linear-probe accuracy of the trunk features, using truth
/// labels of `train` for fitting and of `test` for scoring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub knn: f64,
    pub probe: f64,
}

pub fn evaluate_features(model: &ClassifierModel, train: &Dataset, test: &Dataset, seed: u64) -> Result<FeatureScores> {
    let (Some(train_truth), Some(test_truth)) = (train.truth(), test.truth()) else {
        return Err(invalid("evaluation needs truth labels on both splits"));
    };
    let train_emb = model.embed(train.features())?;
    let test_emb = model.embed(test.features())?;
    let k = KNN_NEIGHBOURS.min(train.len());
    let knn = weighted_knn_eval(
        &train_emb,
        train_truth.labels(),
        &test_emb,
        test_truth.labels(),
        k,
        KNN_TEMPERATURE,
    )?;
    let probe = linear_probe_eval(
        &train_emb,
        train_truth.labels(),
        &test_emb,
        test_truth.labels(),
        &probe_config(seed),
    )?;
    Ok(FeatureScores { knn, probe })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceRow {
    pub mode: ImbalanceMode,
    pub method: Method,
    pub seed: u64,
    pub train_points: usize,
    pub knn: f64,
    pub probe: f64,
    /// Supervised accuracy minus this method's, in the same mode.
    pub knn_gap: f64,
    pub probe_gap: f64,
}

pub const IMBALANCE_MODES: [ImbalanceMode; 3] = [ImbalanceMode::Full, ImbalanceMode::Light, ImbalanceMode::Heavy];
pub const IMBALANCE_METHODS: [Method; 3] = [Method::Supervised, Method::Sinkhorn, Method::KMeans];

/// Trains supervised, transport and K-means labellers on full, lightly and
/// heavily imbalanced training splits of one blob dataset, and scores the
/// features on a balanced held-out split.
pub fn run_imbalance_suite(base: &BlobSpec, cfg: &TrainConfig, test_fraction: f64) -> Result<Vec<ImbalanceRow>> {
    run_imbalance_suite_on(&make_blobs(base)?, cfg, test_fraction)
}

/// As [`run_imbalance_suite`] for any dataset with truth labels.
pub fn run_imbalance_suite_on(data: &Dataset, cfg: &TrainConfig, test_fraction: f64) -> Result<Vec<ImbalanceRow>> {
    let classes = data
        .truth()
        .ok_or_else(|| invalid("the imbalance suite needs truth labels"))?
        .k();
    let data = data.clone().with_test_split(test_fraction, derive_seed(cfg.seed, 10))?;
    let test = data.part(Split::Test);
    let mut rows = Vec::with_capacity(9);
    for mode in IMBALANCE_MODES {
        let spec = ImbalanceSpec::new(mode, classes);
        let train = apply_imbalance(&data, &spec, derive_seed(cfg.seed, 11))?.part(Split::Train);
        let mut supervised = None;
        for method in IMBALANCE_METHODS {
            let run_cfg = TrainConfig { method, ..cfg.clone() };
            let outcome = self_label_train(&train, &run_cfg)?;
            let scores = evaluate_features(&outcome.model, &train, &test, derive_seed(cfg.seed, 12))?;
            let reference = *supervised.get_or_insert(scores);
            rows.push(ImbalanceRow {
                mode,
                method,
                seed: cfg.seed,
                train_points: train.len(),
                knn: scores.knn,
                probe: scores.probe,
                knn_gap: reference.knn - scores.knn,
                probe_gap: reference.probe - scores.probe,
            });
        }
    }
    Ok(rows)
}

pub fn write_imbalance_csv<W: Write>(mut out: W, rows: &[ImbalanceRow]) -> Result<()> {
    writeln!(out, "mode,method,seed,train_points,knn,probe,knn_gap,probe_gap")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.method,
            r.seed,
            r.train_points,
            r.knn,
            r.probe,
            r.knn_gap,
            r.probe_gap
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub head: usize,
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
}

/// Scores every head against the truth independently. Head 0 is the
/// canonical head reported by the command-line tool.
pub fn head_selection_metrics(assignments: &[HardAssignment], truth: &Labeling) -> Result<Vec<HeadMetrics>> {
    assignments
        .iter()
        .enumerate()
        .map(|(head, a)| {
            let l = Labeling::from(a);
            Ok(HeadMetrics {
                head,
                nmi: nmi(&l, truth)?,
                ami: adjusted_nmi(&l, truth)?,
                ari: adjusted_rand(&l, truth)?,
            })
        })
        .collect()
}
