//! Small differentiable classifier: a shared trunk (identity, or one affine +
//! ReLU layer) feeding `T` affine softmax heads, with analytic gradients of
//! the summed cross-entropy and a momentum SGD driver.
//!
//! Parameter layout (flat `f64` vector): trunk weight `H x D` row-major, trunk
//! bias `H` (hidden trunk only), then for each head its weight `K_t x F`
//! row-major followed by its bias `K_t`, where `F` is the trunk output width.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TransformSampler;
use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::FeatureMatrix;
use crate::ot::{HardAssignment, LogPredictionMatrix, TransportPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trunk {
    Identity,
    Hidden { width: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub trunk: Trunk,
    /// Number of labels of each head.
    pub heads: Vec<usize>,
}

impl Architecture {
    pub fn new(input_dim: usize, trunk: Trunk, heads: Vec<usize>) -> Result<Self> {
        let arch = Self {
            input_dim,
            trunk,
            heads,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input dimension must be positive"));
        }
        if let Trunk::Hidden { width: 0 } = self.trunk {
            return Err(invalid("hidden width must be positive"));
        }
        if self.heads.is_empty() || self.heads.iter().any(|&k| k == 0) {
            return Err(invalid("need at least one head, each with a positive label count"));
        }
        Ok(())
    }

    /// Width `F` of the trunk output.
    pub fn feature_dim(&self) -> usize {
        match self.trunk {
            Trunk::Identity => self.input_dim,
            Trunk::Hidden { width } => width,
        }
    }

    fn trunk_params(&self) -> usize {
        match self.trunk {
            Trunk::Identity => 0,
            Trunk::Hidden { width } => width * self.input_dim + width,
        }
    }

    fn head_offsets(&self) -> Vec<usize> {
        let f = self.feature_dim();
        let mut offsets = Vec::with_capacity(self.heads.len());
        let mut at = self.trunk_params();
        for &k in &self.heads {
            offsets.push(at);
            at += k * f + k;
        }
        offsets
    }

    pub fn num_params(&self) -> usize {
        let f = self.feature_dim();
        self.trunk_params() + self.heads.iter().map(|&k| k * f + k).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    params: Vec<f64>,
    seed: u64,
}

/// Training target for one head.
#[derive(Debug, Clone, Copy)]
pub enum HeadTarget<'a> {
    Hard(&'a HardAssignment),
    /// Columns of `Q` renormalized to `q(. | x_i)`.
    Soft(&'a TransportPlan),
}

enum Targets {
    Hard(Vec<usize>),
    Soft { classes: usize, probs: Vec<f64> },
}

impl Targets {
    fn build(head: usize, classes: usize, points: usize, target: &HeadTarget<'_>) -> Result<Self> {
        match target {
            HeadTarget::Hard(a) => {
                check_dim("target length", points, a.len())?;
                if a.classes() != classes {
                    return Err(invalid(format!(
                        "head {head} has {classes} labels but its target has {}",
                        a.classes()
                    )));
                }
                Ok(Targets::Hard(a.labels().to_vec()))
            }
            HeadTarget::Soft(q) => {
                check_dim("soft target columns", points, q.points())?;
                check_dim("soft target rows", classes, q.classes())?;
                let mut probs = q.as_columns().to_vec();
                for col in probs.chunks_exact_mut(classes) {
                    let s: f64 = col.iter().sum();
                    if s > 0.0 {
                        col.iter_mut().for_each(|v| *v /= s);
                    }
                }
                Ok(Targets::Soft { classes, probs })
            }
        }
    }
}

fn build_targets(model: &ClassifierModel, points: usize, targets: &[HeadTarget<'_>]) -> Result<Vec<Targets>> {
    if targets.len() != model.arch.heads.len() {
        return Err(invalid(format!(
            "model has {} heads but {} targets were given",
            model.arch.heads.len(),
            targets.len()
        )));
    }
    targets
        .iter()
        .enumerate()
        .map(|(t, target)| Targets::build(t, model.arch.heads[t], points, target))
        .collect()
}

fn log_softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

impl ClassifierModel {
    /// Seeded init: every weight and bias uniform in `+-1/sqrt(fan_in)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.num_params());
        if let Trunk::Hidden { width } = arch.trunk {
            let bound = 1.0 / (arch.input_dim as f64).sqrt();
            for _ in 0..width * arch.input_dim + width {
                params.push(rng.random_range(-bound..bound));
            }
        }
        let f = arch.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        for &k in &arch.heads {
            for _ in 0..k * f + k {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Self { arch, params, seed })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.num_params()];
        Ok(Self {
            arch,
            params,
            seed: 0,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_dim("parameter vector", arch.num_params(), params.len())?;
        Ok(Self { arch, params, seed })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_heads(&self) -> usize {
        self.arch.heads.len()
    }

    fn check_input(&self, x: &FeatureMatrix) -> Result<()> {
        check_dim("input feature dimension", self.arch.input_dim, x.cols())
    }

    fn trunk_row(&self, x: &[f64], out: &mut [f64], pre: Option<&mut [f64]>) {
        match self.arch.trunk {
            Trunk::Identity => out.copy_from_slice(x),
            Trunk::Hidden { width } => {
                let d = self.arch.input_dim;
                let (w, b) = self.params[..width * d + width].split_at(width * d);
                let mut pre_store = pre;
                for h in 0..width {
                    let z = b[h] + w[h * d..(h + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                    if let Some(p) = pre_store.as_deref_mut() {
                        p[h] = z;
                    }
                    out[h] = z.max(0.0);
                }
            }
        }
    }

    fn head_logits(&self, head: usize, offset: usize, feat: &[f64], out: &mut [f64]) {
        let f = self.arch.feature_dim();
        let k = self.arch.heads[head];
        let (w, b) = self.params[offset..offset + k * f + k].split_at(k * f);
        for y in 0..k {
            out[y] = b[y] + w[y * f..(y + 1) * f].iter().zip(feat).map(|(a, v)| a * v).sum::<f64>();
        }
    }

    /// Trunk output for every row of `x`.
    pub fn embed(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_input(x)?;
        let f = self.arch.feature_dim();
        let mut out = FeatureMatrix::zeros(x.rows(), f);
        for i in 0..x.rows() {
            self.trunk_row(x.row(i), out.row_mut(i), None);
        }
        Ok(out)
    }

    /// Point-major log-softmax outputs of each head.
    fn log_softmax_columns(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let offsets = self.arch.head_offsets();
        let mut feat = vec![0.0; self.arch.feature_dim()];
        let mut outs: Vec<Vec<f64>> = self
            .arch
            .heads
            .iter()
            .map(|&k| vec![0.0; k * x.rows()])
            .collect();
        for i in 0..x.rows() {
            self.trunk_row(x.row(i), &mut feat, None);
            for (t, out) in outs.iter_mut().enumerate() {
                let k = self.arch.heads[t];
                let col = &mut out[i * k..(i + 1) * k];
                self.head_logits(t, offsets[t], &feat, col);
                log_softmax_in_place(col);
            }
        }
        Ok(outs)
    }

    /// `log softmax(h_t(Phi(x_i)))` for every head `t`.
    pub fn forward(&self, x: &FeatureMatrix) -> Result<Vec<LogPredictionMatrix>> {
        let n = x.rows();
        self.log_softmax_columns(x)?
            .into_iter()
            .zip(&self.arch.heads)
            .map(|(cols, &k)| LogPredictionMatrix::from_columns(k, n, cols))
            .collect()
    }

    /// Unnormalized log-softmax outputs; used where predictions are averaged
    /// before normalization.
    pub(crate) fn forward_raw(&self, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.log_softmax_columns(x)
    }

    /// Mean cross-entropy over `rows` summed across heads; accumulates its
    /// gradient into `grad` when given. `x.row(b)` holds the features of point `rows[b]`.
    fn batch_loss(&self, x: &FeatureMatrix, rows: &[usize], targets: &[Targets], mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.arch.input_dim;
        let f = self.arch.feature_dim();
        let offsets = self.arch.head_offsets();
        let scale = 1.0 / rows.len() as f64;
        let mut feat = vec![0.0; f];
        let mut pre = vec![0.0; f];
        let mut dfeat = vec![0.0; f];
        let kmax = *self.arch.heads.iter().max().unwrap();
        let mut z = vec![0.0; kmax];
        let mut loss = 0.0;
        for (b, &point) in rows.iter().enumerate() {
            let xr = x.row(b);
            self.trunk_row(xr, &mut feat, Some(&mut pre));
            dfeat.iter_mut().for_each(|v| *v = 0.0);
            for (t, target) in targets.iter().enumerate() {
                let k = self.arch.heads[t];
                let z = &mut z[..k];
                self.head_logits(t, offsets[t], &feat, z);
                log_softmax_in_place(z);
                match target {
                    Targets::Hard(labels) => loss -= scale * z[labels[point]],
                    Targets::Soft { classes, probs } => {
                        let q = &probs[point * classes..(point + 1) * classes];
                        loss -= scale * q.iter().zip(z.iter()).map(|(a, l)| a * l).sum::<f64>();
                    }
                }
                let Some(g) = grad.as_deref_mut() else { continue };
                // dL/dlogit = softmax - target
                for (y, zy) in z.iter_mut().enumerate() {
                    let target_y = match target {
                        Targets::Hard(labels) => f64::from(u8::from(labels[point] == y)),
                        Targets::Soft { classes, probs } => probs[point * classes + y],
                    };
                    *zy = scale * (zy.exp() - target_y);
                }
                let off = offsets[t];
                let (gw, gb) = g[off..off + k * f + k].split_at_mut(k * f);
                let w = &self.params[off..off + k * f];
                for y in 0..k {
                    let dz = z[y];
                    gb[y] += dz;
                    for j in 0..f {
                        gw[y * f + j] += dz * feat[j];
                        dfeat[j] += dz * w[y * f + j];
                    }
                }
            }
            if let (Some(g), Trunk::Hidden { width }) = (grad.as_deref_mut(), self.arch.trunk) {
                let (gw, gb) = g[..width * d + width].split_at_mut(width * d);
                for h in 0..width {
                    if pre[h] <= 0.0 {
                        continue;
                    }
                    let dh = dfeat[h];
                    gb[h] += dh;
                    for j in 0..d {
                        gw[h * d + j] += dh * xr[j];
                    }
                }
            }
        }
        loss
    }

    fn weight_decay(&self, weight_decay: f64, grad: Option<&mut [f64]>) -> f64 {
        if weight_decay == 0.0 {
            return 0.0;
        }
        if let Some(g) = grad {
            for (gi, p) in g.iter_mut().zip(&self.params) {
                *gi += weight_decay * p;
            }
        }
        0.5 * weight_decay * self.params.iter().map(|p| p * p).sum::<f64>()
    }
}

/// Full-batch loss `sum_t CE_t + (wd/2)||theta||^2` and its gradient.
pub fn loss_and_gradient(
    model: &ClassifierModel,
    x: &FeatureMatrix,
    targets: &[HeadTarget<'_>],
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    model.check_input(x)?;
    let built = build_targets(model, x.rows(), targets)?;
    if x.rows() == 0 {
        return Err(invalid("empty input"));
    }
    let rows: Vec<usize> = (0..x.rows()).collect();
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = model.batch_loss(x, &rows, &built, Some(&mut grad));
    loss += model.weight_decay(weight_decay, Some(&mut grad));
    Ok((loss, grad))
}

/// Step-decay momentum SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    /// Epochs at which the rate is multiplied by `drop_factor`.
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl SgdConfig {
    /// lr 0.05, momentum 0.9, weight decay 1e-4, rate divided by ten at 60% and
    /// 90% of training.
    pub fn desk_defaults(epochs: usize, seed: u64) -> Self {
        let at = |frac: f64| (frac * epochs as f64).round() as usize;
        Self {
            learning_rate: 0.05,
            drop_epochs: vec![at(0.6), at(0.9)],
            drop_factor: 0.1,
            batch_size: 128,
            epochs,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.drop_factor > 0.0) {
            return Err(invalid("weight decay must be nonnegative and the drop factor positive"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.drop_factor.powi(drops as i32)
    }
}

/// Momentum buffer carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(model: &ClassifierModel) -> Self {
        Self {
            velocity: vec![0.0; model.params.len()],
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Seeded minibatch partition of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One momentum-SGD update on `batch`. Returns the batch's data loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step(
    model: &mut ClassifierModel,
    state: &mut SgdState,
    x: &FeatureMatrix,
    targets: &[HeadTarget<'_>],
    batch: &[usize],
    learning_rate: f64,
    config: &SgdConfig,
    augment: Option<&mut TransformSampler>,
) -> Result<f64> {
    model.check_input(x)?;
    let built = build_targets(model, x.rows(), targets)?;
    Ok(step_with_targets(model, state, x, &built, batch, learning_rate, config, augment))
}

#[allow(clippy::too_many_arguments)]
fn step_with_targets(
    model: &mut ClassifierModel,
    state: &mut SgdState,
    x: &FeatureMatrix,
    targets: &[Targets],
    batch: &[usize],
    learning_rate: f64,
    config: &SgdConfig,
    augment: Option<&mut TransformSampler>,
) -> f64 {
    let mut xb = x.select_rows(batch);
    if let Some(sampler) = augment {
        xb = sampler.sample().apply(&xb);
    }
    let mut grad = vec![0.0; model.params.len()];
    let loss = model.batch_loss(&xb, batch, targets, Some(&mut grad));
    model.weight_decay(config.weight_decay, Some(&mut grad));
    for ((p, v), g) in model.params.iter_mut().zip(&mut state.velocity).zip(&grad) {
        *v = config.momentum * *v + g;
        *p -= learning_rate * *v;
    }
    loss
}

/// One pass over a seeded shuffle of minibatches. Returns the mean data loss
/// (cross-entropy summed over heads, without weight decay) over the epoch.
pub fn sgd_epoch(
    model: &mut ClassifierModel,
    state: &mut SgdState,
    x: &FeatureMatrix,
    targets: &[HeadTarget<'_>],
    config: &SgdConfig,
    epoch: usize,
    mut augment: Option<&mut TransformSampler>,
) -> Result<f64> {
    config.validate()?;
    model.check_input(x)?;
    let built = build_targets(model, x.rows(), targets)?;
    if x.rows() == 0 {
        return Err(invalid("empty input"));
    }
    let lr = config.learning_rate_at(epoch);
    let mut total = 0.0;
    for batch in epoch_batches(x.rows(), config.batch_size, config.seed, epoch) {
        let loss = step_with_targets(model, state, x, &built, &batch, lr, config, augment.as_deref_mut());
        total += loss * batch.len() as f64;
    }
    Ok(total / x.rows() as f64)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `SLCK`: magic, `u32` version, layout descriptor (`u32` input dim,
/// `u32` trunk kind 0/1, `u32` hidden width, `u32` head count, `u32` labels per
/// head, `u64` seed, `u64` parameter count), then the `f64` parameters. All
/// little-endian.
pub fn write_checkpoint<W: Write>(mut out: W, model: &ClassifierModel) -> Result<()> {
    let a = &model.arch;
    let u32_of = |v: usize| u32::try_from(v).map_err(|_| Error::TooLarge(format!("{v} in layout")));
    let mut buf = Vec::with_capacity(40 + 8 * model.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of(a.input_dim)?.to_le_bytes());
    let (kind, width) = match a.trunk {
        Trunk::Identity => (0u32, 0usize),
        Trunk::Hidden { width } => (1, width),
    };
    buf.extend_from_slice(&kind.to_le_bytes());
    buf.extend_from_slice(&u32_of(width)?.to_le_bytes());
    buf.extend_from_slice(&u32_of(a.heads.len())?.to_le_bytes());
    for &k in &a.heads {
        buf.extend_from_slice(&u32_of(k)?.to_le_bytes());
    }
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ClassifierModel> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        let s = bytes
            .get(at..at + len)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        at += len;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing SLCK magic".into()));
    }
    let rd32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let rd64 = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
    let version = rd32(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = rd32(take(4)?);
    let kind = rd32(take(4)?);
    let width = rd32(take(4)?);
    let trunk = match kind {
        0 => Trunk::Identity,
        1 => Trunk::Hidden { width },
        other => return Err(Error::Format(format!("unknown trunk kind {other}"))),
    };
    let head_count = rd32(take(4)?);
    let mut heads = Vec::with_capacity(head_count);
    for _ in 0..head_count {
        heads.push(rd32(take(4)?));
    }
    let seed = rd64(take(8)?);
    let count = rd64(take(8)?) as usize;
    let arch = Architecture::new(input_dim, trunk, heads).map_err(|e| Error::Format(e.to_string()))?;
    if count != arch.num_params() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, layout implies {}",
            arch.num_params()
        )));
    }
    let payload = take(8 * count)?;
    let params = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if take(1).is_ok() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    ClassifierModel::from_params(arch, params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};
    use crate::sinkhorn::{sinkhorn_solve, SinkhornConfig};
    use crate::ot::Marginals;

    fn random_input(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureMatrix::new(n, d, data).unwrap()
    }

    fn random_labels(n: usize, k: usize, seed: u64) -> HardAssignment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HardAssignment::new((0..n).map(|_| rng.random_range(0..k)).collect(), k).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let arch = Architecture::new(3, Trunk::Hidden { width: 4 }, vec![2, 5]).unwrap();
        let model = ClassifierModel::zeros(arch).unwrap();
        let out = model.forward(&random_input(4, 3, 1)).unwrap();
        for (lp, k) in out.iter().zip([2.0f64, 5.0]) {
            for v in lp.as_columns() {
                assert!((v + k.ln()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_head_at_origin_is_even() {
        let arch = Architecture::new(1, Trunk::Identity, vec![2]).unwrap();
        let model = ClassifierModel::from_params(arch, vec![1.0, -1.0, 0.0, 0.0], 0).unwrap();
        let x = FeatureMatrix::new(1, 1, vec![0.0]).unwrap();
        let lp = &model.forward(&x).unwrap()[0];
        assert_eq!(lp.column(0), &[0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn forward_matches_naive_softmax() {
        let arch = Architecture::new(3, Trunk::Hidden { width: 4 }, vec![3]).unwrap();
        let model = ClassifierModel::new(arch, 42).unwrap();
        let x = FeatureMatrix::new(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let p = model.params();
        let hidden: Vec<f64> = (0..4)
            .map(|h| (p[12 + h] + (0..3).map(|j| p[h * 3 + j] * x.row(0)[j]).sum::<f64>()).max(0.0))
            .collect();
        let logits: Vec<f64> = (0..3)
            .map(|y| p[16 + 12 + y] + (0..4).map(|j| p[16 + y * 4 + j] * hidden[j]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let naive: Vec<f64> = logits.iter().map(|v| (v.exp() / z).ln()).collect();
        let got = model.forward(&x).unwrap()[0].column(0).to_vec();
        for (a, b) in got.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in got.iter().zip(&GOLDEN_FORWARD) {
            assert!((a - b).abs() < 1e-12, "{got:?}");
        }
    }

    const GOLDEN_FORWARD: [f64; 3] = [-1.304919534839146, -1.1843576233382846, -0.8607070357785637];

    #[test]
    fn saturated_correct_logits_have_tiny_loss() {
        let arch = Architecture::new(2, Trunk::Identity, vec![2]).unwrap();
        let model = ClassifierModel::from_params(arch, vec![30.0, 0.0, -30.0, 0.0, 0.0, 0.0], 0).unwrap();
        let x = FeatureMatrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let labels = HardAssignment::new(vec![0, 1], 2).unwrap();
        let (loss, _) = loss_and_gradient(&model, &x, &[HeadTarget::Hard(&labels)], 0.0).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn bias_gradient_is_softmax_minus_onehot() {
        let arch = Architecture::new(1, Trunk::Identity, vec![2]).unwrap();
        let model = ClassifierModel::from_params(arch, vec![0.3, -0.7, 0.1, 0.4], 0).unwrap();
        let x = FeatureMatrix::new(1, 1, vec![1.5]).unwrap();
        let labels = HardAssignment::new(vec![1], 2).unwrap();
        let (_, grad) = loss_and_gradient(&model, &x, &[HeadTarget::Hard(&labels)], 0.0).unwrap();
        let z: [f64; 2] = [0.3 * 1.5 + 0.1, -0.7 * 1.5 + 0.4];
        let s = z[0].exp() + z[1].exp();
        let expected = [z[0].exp() / s, z[1].exp() / s - 1.0];
        assert!((grad[2] - expected[0]).abs() < 1e-15);
        assert!((grad[3] - expected[1]).abs() < 1e-15);
        assert!((grad[0] - 1.5 * expected[0]).abs() < 1e-15);
    }

    fn gradient_check(trunk: Trunk, heads: Vec<usize>, soft: bool) {
        let arch = Architecture::new(4, trunk, heads.clone()).unwrap();
        let model = ClassifierModel::new(arch, 9).unwrap();
        let x = random_input(7, 4, 5);
        let hard: Vec<HardAssignment> = heads.iter().enumerate().map(|(t, &k)| random_labels(7, k, t as u64)).collect();
        let plans: Vec<TransportPlan> = heads
            .iter()
            .map(|&k| {
                let lp = LogPredictionMatrix::from_columns(k, 7, (0..7 * k).map(|v| -((v % 5) as f64) * 0.3).collect()).unwrap();
                sinkhorn_solve(&lp, &Marginals::equipartition(k, 7).unwrap(), &SinkhornConfig::default(), None)
                    .unwrap()
                    .0
            })
            .collect();
        let targets: Vec<HeadTarget<'_>> = if soft {
            plans.iter().map(HeadTarget::Soft).collect()
        } else {
            hard.iter().map(HeadTarget::Hard).collect()
        };
        let wd = 1e-2;
        let (_, grad) = loss_and_gradient(&model, &x, &targets, wd).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..model.params().len() {
            let mut plus = model.clone();
            plus.params_mut()[p] += h;
            let mut minus = model.clone();
            minus.params_mut()[p] -= h;
            let fp = loss_and_gradient(&plus, &x, &targets, wd).unwrap().0;
            let fm = loss_and_gradient(&minus, &x, &targets, wd).unwrap().0;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (numeric - grad[p]).abs() / numeric.abs().max(grad[p].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "{trunk:?} {heads:?} soft={soft}: max relative error {worst}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for trunk in [Trunk::Identity, Trunk::Hidden { width: 5 }] {
            for heads in [vec![3], vec![3, 2, 4]] {
                for soft in [false, true] {
                    gradient_check(trunk, heads.clone(), soft);
                }
            }
        }
    }

    #[test]
    fn loss_adds_over_heads() {
        let arch = Architecture::new(4, Trunk::Hidden { width: 6 }, vec![3, 3, 3]).unwrap();
        let model = ClassifierModel::new(arch, 2).unwrap();
        let x = random_input(10, 4, 8);
        let labels: Vec<HardAssignment> = (0..3).map(|t| random_labels(10, 3, 20 + t)).collect();
        let targets: Vec<HeadTarget<'_>> = labels.iter().map(HeadTarget::Hard).collect();
        let (total, _) = loss_and_gradient(&model, &x, &targets, 0.0).unwrap();
        let log_ps = model.forward(&x).unwrap();
        let separate: f64 = log_ps
            .iter()
            .zip(&labels)
            .map(|(lp, a)| -(0..10).map(|i| lp.get(a.labels()[i], i)).sum::<f64>() / 10.0)
            .sum();
        assert!((total - separate).abs() < 1e-12);
    }

    #[test]
    fn mismatched_targets_are_rejected() {
        let arch = Architecture::new(2, Trunk::Identity, vec![2, 2]).unwrap();
        let model = ClassifierModel::new(arch, 0).unwrap();
        let x = random_input(3, 2, 0);
        let a = random_labels(3, 2, 0);
        assert!(loss_and_gradient(&model, &x, &[HeadTarget::Hard(&a)], 0.0).is_err());
        assert!(model.forward(&random_input(3, 3, 0)).is_err());
    }

    fn blob_setup() -> (FeatureMatrix, HardAssignment) {
        let data = make_blobs(&BlobSpec::balanced(2, 200, 2, 8.0, 3)).unwrap();
        let truth = data.truth().unwrap();
        (data.features().clone(), HardAssignment::new(truth.labels().to_vec(), 2).unwrap())
    }

    fn train(seed: u64, epochs: usize) -> (ClassifierModel, f64) {
        let (x, labels) = blob_setup();
        let arch = Architecture::new(2, Trunk::Hidden { width: 8 }, vec![2]).unwrap();
        let mut model = ClassifierModel::new(arch, seed).unwrap();
        let mut state = SgdState::new(&model);
        let config = SgdConfig::desk_defaults(epochs, seed);
        let mut loss = f64::NAN;
        for e in 0..epochs {
            loss = sgd_epoch(&mut model, &mut state, &x, &[HeadTarget::Hard(&labels)], &config, e, None).unwrap();
        }
        (model, loss)
    }

    #[test]
    fn separable_blobs_are_fitted() {
        let (model, _) = train(1, 50);
        let (x, labels) = blob_setup();
        let (ce, _) = loss_and_gradient(&model, &x, &[HeadTarget::Hard(&labels)], 0.0).unwrap();
        assert!(ce < 0.1, "{ce}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (a, la) = train(4, 6);
        let (b, lb) = train(4, 6);
        assert_eq!(a.params(), b.params());
        assert_eq!(la.to_bits(), lb.to_bits());
        let (c, _) = train(5, 6);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let (x, labels) = blob_setup();
        let arch = Architecture::new(2, Trunk::Hidden { width: 3 }, vec![2]).unwrap();
        let mut model = ClassifierModel::new(arch, 0).unwrap();
        let before = model.clone();
        let mut state = SgdState::new(&model);
        let config = SgdConfig {
            learning_rate: 0.0,
            ..SgdConfig::desk_defaults(1, 0)
        };
        let loss = sgd_epoch(&mut model, &mut state, &x, &[HeadTarget::Hard(&labels)], &config, 0, None).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(model, before);
    }

    #[test]
    fn epoch_equals_its_batches_in_two_halves() {
        let (x, labels) = blob_setup();
        let arch = Architecture::new(2, Trunk::Hidden { width: 3 }, vec![2]).unwrap();
        let config = SgdConfig {
            momentum: 0.0,
            batch_size: 16,
            ..SgdConfig::desk_defaults(4, 11)
        };
        let targets = [HeadTarget::Hard(&labels)];
        let mut whole = ClassifierModel::new(arch.clone(), 7).unwrap();
        let mut state = SgdState::new(&whole);
        sgd_epoch(&mut whole, &mut state, &x, &targets, &config, 2, None).unwrap();

        let mut halves = ClassifierModel::new(arch, 7).unwrap();
        let mut state = SgdState::new(&halves);
        let batches = epoch_batches(x.rows(), config.batch_size, config.seed, 2);
        let (first, second) = batches.split_at(batches.len() / 2);
        let lr = config.learning_rate_at(2);
        for part in [first, second] {
            for b in part {
                sgd_step(&mut halves, &mut state, &x, &targets, b, lr, &config, None).unwrap();
            }
        }
        assert_eq!(whole.params(), halves.params());
    }

    #[test]
    fn learning_rate_drops_by_ten() {
        let c = SgdConfig::desk_defaults(100, 0);
        assert_eq!(c.drop_epochs, vec![60, 90]);
        assert_eq!(c.learning_rate_at(59), 0.05);
        assert!((c.learning_rate_at(60) - 0.005).abs() < 1e-15);
        assert!((c.learning_rate_at(95) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::new(3, Trunk::Hidden { width: 4 }, vec![2, 5]).unwrap();
        let model = ClassifierModel::new(arch, 77).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model).unwrap();
        assert_eq!(&buf[..4], b"SLCK");
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), model);
        assert!(matches!(read_checkpoint(&buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(extra.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn parameter_count_matches_layout() {
        let arch = Architecture::new(4, Trunk::Hidden { width: 3 }, vec![2, 5]).unwrap();
        assert_eq!(arch.num_params(), 4 * 3 + 3 + (2 * 3 + 2) + (5 * 3 + 5));
        assert_eq!(ClassifierModel::new(arch.clone(), 0).unwrap().params().len(), arch.num_params());
        assert!(Architecture::new(4, Trunk::Identity, vec![]).is_err());
    }
}
