//! Loss, optimizer loop, finite-difference gradient checking.

use std::collections::BTreeMap;
use std::ops::Range;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleWindow};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Model;
use crate::nn::ParamStore;

/// Samples per gradient work unit. Partial gradients are summed in chunk
/// order, so results do not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub patience: usize,
    /// Train:test day ratio.
    pub split: [u32; 2],
    /// Share of training days held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.001,
            max_epochs: 30,
            max_steps: None,
            seed: 0,
            optimizer: Optimizer::Adam,
            patience: 10,
            split: [5, 3],
            validation_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.split.contains(&0) {
            return Err(Error::Config("split ratio parts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn split_ratio(&self) -> (u32, u32) {
        (self.split[0], self.split[1])
    }
}

pub fn sse_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum())
}

/// `∂L/∂ŷ_i = 2(ŷ_i − y_i)`.
pub fn sse_grad(prediction: f64, label: f64) -> f64 {
    2.0 * (prediction - label)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let blocks = params.blocks_mut().iter_mut().zip(grads.blocks());
        for ((p, g), (m, v)) in blocks.zip(self.m.blocks_mut().iter_mut().zip(self.v.blocks_mut())) {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f64) {
    for (p, g) in params.blocks_mut().iter_mut().zip(grads.blocks()) {
        for (a, d) in p.data.iter_mut().zip(&g.data) {
            *a -= lr * d;
        }
    }
}

/// SSE over `batch` and its gradient.
pub fn batch_gradient(
    model: &Model,
    p: &ParamStore,
    data: &Dataset,
    batch: &[SampleWindow],
    exec: Execution,
) -> Result<(f64, ParamStore)> {
    let parts = exec.map_chunks(batch, CHUNK, |chunk| -> Result<(f64, ParamStore)> {
        let mut g = p.zeros_like();
        let mut loss = 0.0;
        for s in chunk {
            let cache = model.forward(p, data, s)?;
            let err = cache.prediction - s.label;
            loss += err * err;
            model.backward(p, &mut g, &cache, sse_grad(cache.prediction, s.label));
        }
        Ok((loss, g))
    });
    let mut total = p.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Model outputs (normalized units) in sample order.
pub fn predict_samples(
    model: &Model,
    p: &ParamStore,
    data: &Dataset,
    samples: &[SampleWindow],
    exec: Execution,
) -> Result<Vec<f64>> {
    exec.map(samples, |s| model.predict(p, data, s)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample squared error over the epoch's batches.
    pub train_loss: f64,
    /// Normalized-unit MAE on the held-out days.
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// Batch SSE after every optimizer step's forward pass.
    pub steps: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: LossHistory,
    pub steps: usize,
    pub best_epoch: usize,
}

/// Splits `train_days` into fitting days and trailing validation days.
pub fn validation_split(train_days: Range<usize>, fraction: f64) -> (Range<usize>, Range<usize>) {
    let n = train_days.len();
    let held = if fraction > 0.0 && n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let cut = train_days.end - held;
    (train_days.start..cut, cut..train_days.end)
}

/// Trains on the samples of `train_days`, holding out the last
/// `validation_fraction` of them for early stopping.
pub fn train(
    model: &Model,
    params: ParamStore,
    data: &Dataset,
    train_days: Range<usize>,
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    let (fit_days, val_days) = validation_split(train_days, config.validation_fraction);
    let history = model.history();
    let fit = data.samples(fit_days, history);
    let val = if val_days.is_empty() { Vec::new() } else { data.samples(val_days, history) };
    info!("training {} on {} samples, validating on {}", model.kind().name(), fit.len(), val.len());
    fit_samples(model, params, data, &fit, &val, config, exec)
}

/// Optimizes SSE on `samples`; early-stops on `validation` when non-empty.
pub fn fit_samples(
    model: &Model,
    mut params: ParamStore,
    data: &Dataset,
    samples: &[SampleWindow],
    validation: &[SampleWindow],
    config: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut history = LossHistory::default();
    let mut order: Vec<SampleWindow> = samples.to_vec();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0;
    let mut steps = 0;
    let max_steps = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0;
        for batch in order.chunks(config.batch_size) {
            if steps >= max_steps {
                break;
            }
            let (loss, grads) = batch_gradient(model, &params, data, batch, exec)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { step: steps, loss });
            }
            match config.optimizer {
                Optimizer::Adam => adam.step(&mut params, &grads),
                Optimizer::Sgd => sgd_step(&mut params, &grads, config.learning_rate),
            }
            history.steps.push(loss);
            epoch_loss += loss;
            seen += batch.len();
            steps += 1;
        }
        if seen == 0 {
            break;
        }
        let val_mae = if validation.is_empty() {
            None
        } else {
            let preds = predict_samples(model, &params, data, validation, exec)?;
            let mae = preds.iter().zip(validation).map(|(p, s)| (p - s.label).abs()).sum::<f64>()
                / validation.len() as f64;
            Some(mae)
        };
        let train_loss = epoch_loss / seen as f64;
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_mae:?}");
        history.epochs.push(EpochRecord { epoch, train_loss, val_mae });
        if let Some(mae) = val_mae {
            if best.as_ref().is_none_or(|(b, _, _)| mae < *b) {
                best = Some((mae, params.clone(), epoch));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    info!("early stop after epoch {epoch}");
                    break 'epochs;
                }
            }
        }
        if steps >= max_steps {
            break;
        }
    }
    let (params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, history.epochs.len().saturating_sub(1)),
    };
    Ok(TrainOutcome { params, history, steps, best_epoch })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name and index of the worst scalar.
    pub worst: (String, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub groups: BTreeMap<String, GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckOptions {
    /// Check at most this many random scalars per group; `None` checks all.
    pub per_group: Option<usize>,
    /// Scale the analytic gradient of one group (fault injection).
    pub corrupt: Option<(String, f64)>,
    pub seed: u64,
}

/// Moves every bias off zero and makes the output unit active, so that no
/// ReLU sits exactly on its kink where central differences see half a slope.
pub fn gradcheck_point(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in params.blocks_mut() {
        if block.name.ends_with(".b") {
            block.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    if let Some(out) = params.find("head.out.b") {
        params.get_mut(out).iter_mut().for_each(|v| *v = 0.5);
    }
}

/// Floor on the relative-error denominator so that near-zero gradients are
/// compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient of the summed SSE over `samples` with
/// central differences.
pub fn grad_check(
    model: &Model,
    params: &ParamStore,
    data: &Dataset,
    samples: &[SampleWindow],
    epsilon: f64,
    options: &GradCheckOptions,
    exec: Execution,
) -> Result<GradCheckReport> {
    let (_, mut analytic) = batch_gradient(model, params, data, samples, Execution::Sequential)?;
    if let Some((group, scale)) = &options.corrupt {
        for b in analytic.blocks_mut().iter_mut().filter(|b| b.group() == group) {
            b.data.iter_mut().for_each(|v| *v *= scale);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut by_group: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (bi, b) in params.blocks().iter().enumerate() {
        let entry = by_group.entry(b.group().to_string()).or_default();
        entry.extend((0..b.data.len()).map(|k| (bi, k)));
    }
    if let Some(limit) = options.per_group {
        for scalars in by_group.values_mut() {
            if scalars.len() > limit {
                for i in 0..limit {
                    let j = rng.random_range(i..scalars.len());
                    scalars.swap(i, j);
                }
                scalars.truncate(limit);
            }
        }
    }
    let loss = |p: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let y = model.predict(p, data, s)?;
            total += (y - s.label) * (y - s.label);
        }
        Ok(total)
    };
    let mut groups = BTreeMap::new();
    for (group, scalars) in by_group {
        let results = exec.map(&scalars, |&(bi, k)| -> Result<f64> {
            let mut p = params.clone();
            p.blocks_mut()[bi].data[k] += epsilon;
            let lp = loss(&p)?;
            p.blocks_mut()[bi].data[k] -= 2.0 * epsilon;
            let lm = loss(&p)?;
            Ok(relative_error(analytic.blocks()[bi].data[k], (lp - lm) / (2.0 * epsilon)))
        });
        let mut check = GroupCheck { checked: 0, max_rel_error: 0.0, worst: (String::new(), 0) };
        for (&(bi, k), r) in scalars.iter().zip(results) {
            let r = r?;
            check.checked += 1;
            if r > check.max_rel_error || check.worst.0.is_empty() {
                check.max_rel_error = check.max_rel_error.max(r);
                check.worst = (params.blocks()[bi].name.clone(), k);
            }
        }
        groups.insert(group, check);
    }
    Ok(GradCheckReport { epsilon, groups })
}
