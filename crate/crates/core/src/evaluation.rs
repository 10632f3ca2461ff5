//! Error metrics, baselines and report emission.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleWindow};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::Channel;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::plot;

/// Labels with smaller magnitude are left out of MAPE.
pub const MAPE_ZERO_GUARD: f64 = 1e-8;
pub const AR_RIDGE: f64 = 1e-6;

fn check_lengths(predictions: &[f64], labels: &[f64]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    Ok(())
}

pub fn mae(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    Ok(predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / labels.len() as f64)
}

pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions, labels)?;
    let mse = predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / labels.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    /// Mean absolute percentage error, in percent.
    pub percent: f64,
    pub included: usize,
    pub excluded: usize,
}

pub fn mape(predictions: &[f64], labels: &[f64]) -> Result<Mape> {
    check_lengths(predictions, labels)?;
    let mut sum = 0.0;
    let mut included = 0;
    for (p, y) in predictions.iter().zip(labels) {
        if y.abs() >= MAPE_ZERO_GUARD {
            sum += (p - y).abs() / y.abs();
            included += 1;
        }
    }
    if included == 0 {
        return Err(Error::MapeUndefined(labels.len()));
    }
    Ok(Mape { percent: 100.0 * sum / included as f64, included, excluded: labels.len() - included })
}

/// Anything that maps a sample window to a normalized gap forecast.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, data: &Dataset, sample: &SampleWindow) -> Result<f64>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.model.kind().name().to_string()
    }

    fn predict(&self, data: &Dataset, sample: &SampleWindow) -> Result<f64> {
        self.model.predict(self.params, data, sample)
    }
}

/// Last observed value of the window.
pub fn persistence_baseline(window: &[f64]) -> Result<f64> {
    window.last().copied().ok_or_else(|| Error::Contract("empty window".into()))
}

fn target_window(data: &Dataset, s: &SampleWindow) -> Vec<f64> {
    data.cube().series(Channel::Gap, s.day, s.region, s.start, data.grid().window)
}

pub struct Persistence;

impl Predictor for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn predict(&self, data: &Dataset, s: &SampleWindow) -> Result<f64> {
        persistence_baseline(&target_window(data, s))
    }
}

fn difference(series: &[f64]) -> Vec<f64> {
    series.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Least-squares AR(`p`) coefficients without intercept, `φ_1` first.
/// With `differenced` the fit runs on first differences.
pub fn fit_ar(series: &[f64], p: usize, differenced: bool) -> Result<Vec<f64>> {
    if series.len() < p + 2 {
        return Err(Error::Contract(format!("AR({p}) needs at least {} values, got {}", p + 2, series.len())));
    }
    if p == 0 {
        return Ok(Vec::new());
    }
    let x = if differenced { difference(series) } else { series.to_vec() };
    let rows = x.len() - p;
    if rows == 0 {
        return Err(Error::Contract("series too short after differencing".into()));
    }
    let design = DMatrix::from_fn(rows, p, |r, m| x[r + p - 1 - m]);
    let target = DVector::from_fn(rows, |r, _| x[r + p]);
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * target;
    // A pivot this small relative to the diagonal means the system is singular
    // in practice even when the factorization technically succeeds.
    let scale = xtx.diagonal().amax();
    let solved = xtx.clone().cholesky().and_then(|c| {
        let min_pivot = c.l().diagonal().min();
        (min_pivot * min_pivot > 1e-12 * scale).then(|| c.solve(&xty))
    });
    let phi = match solved {
        Some(phi) => phi,
        None => {
            warn!("AR({p}) normal equations are singular; using ridge {AR_RIDGE:e}");
            let ridge = xtx + DMatrix::identity(p, p) * AR_RIDGE;
            ridge
                .cholesky()
                .ok_or_else(|| Error::Contract("ridge system not positive definite".into()))?
                .solve(&xty)
        }
    };
    Ok(phi.iter().copied().collect())
}

/// One-step forecast from `history` (oldest first).
pub fn ar_forecast(phi: &[f64], history: &[f64], differenced: bool) -> Result<f64> {
    let need = phi.len() + usize::from(differenced);
    if history.len() < need.max(1) {
        return Err(Error::Contract(format!("AR forecast needs {need} values, got {}", history.len())));
    }
    let x = if differenced { difference(history) } else { history.to_vec() };
    let n = x.len();
    let step: f64 = phi.iter().enumerate().map(|(m, f)| f * x[n - 1 - m]).sum();
    Ok(if differenced { history[history.len() - 1] + step } else { step })
}

/// Per-region AR(p) fitted on the normalized gap of the training days.
pub struct ArBaseline {
    pub order: usize,
    pub differenced: bool,
    pub coefficients: Vec<Vec<f64>>,
}

impl ArBaseline {
    pub fn fit(data: &Dataset, train_days: Range<usize>, order: usize, differenced: bool, exec: Execution) -> Result<Self> {
        let ipd = data.grid().intervals_per_day();
        if order + usize::from(differenced) > data.grid().window {
            return Err(Error::Config(format!("AR order {order} does not fit a window of {}", data.grid().window)));
        }
        let coefficients = exec
            .map_range(data.grid().regions(), |r| {
                let series: Vec<f64> = train_days.clone().flat_map(|d| data.cube().series(Channel::Gap, d, r, 0, ipd)).collect();
                fit_ar(&series, order, differenced)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(ArBaseline { order, differenced, coefficients })
    }
}

impl Predictor for ArBaseline {
    fn name(&self) -> String {
        let d = if self.differenced { "d" } else { "" };
        format!("ar{}{d}", self.order)
    }

    fn predict(&self, data: &Dataset, s: &SampleWindow) -> Result<f64> {
        ar_forecast(&self.coefficients[s.region], &target_window(data, s), self.differenced)
    }
}

/// Normalized predictions for a set of test windows.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: String,
    pub samples: Vec<SampleWindow>,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
    pub n: usize,
    pub excluded_zero_targets: usize,
    pub meta: RunMeta,
    pub rows: usize,
    pub cols: usize,
    /// MAE per region, row-major.
    pub region_mae: Vec<f64>,
}

/// Runs `predictor` over every window in `test_days` that has `history`
/// days behind it (history may reach into training days).
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &Dataset,
    test_days: Range<usize>,
    history: usize,
    exec: Execution,
) -> Result<Evaluation> {
    let samples = data.samples(test_days, history);
    if samples.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let predictions = exec.map(&samples, |s| predictor.predict(data, s)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { model: predictor.name(), samples, predictions })
}

impl Evaluation {
    /// Metrics in gap units, or in normalized units when `normalized`.
    pub fn report(&self, data: &Dataset, normalized: bool, meta: RunMeta) -> Result<EvalReport> {
        let stats = data.stats();
        let conv = |v: f64| if normalized { v } else { stats.denormalize_value(Channel::Gap, v) };
        let preds: Vec<f64> = self.predictions.iter().map(|&v| conv(v)).collect();
        let labels: Vec<f64> = self.samples.iter().map(|s| conv(s.label)).collect();
        let m = mape(&preds, &labels)?;
        let grid = data.grid();
        let mut sum = vec![0.0; grid.regions()];
        let mut count = vec![0usize; grid.regions()];
        for ((p, y), s) in preds.iter().zip(&labels).zip(&self.samples) {
            sum[s.region] += (p - y).abs();
            count[s.region] += 1;
        }
        let region_mae = sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
        let model = if normalized { format!("{} [normalized]", self.model) } else { self.model.clone() };
        Ok(EvalReport {
            model,
            mae: mae(&preds, &labels)?,
            rmse: rmse(&preds, &labels)?,
            mape_percent: m.percent,
            n: labels.len(),
            excluded_zero_targets: m.excluded,
            meta,
            rows: grid.rows,
            cols: grid.cols,
            region_mae,
        })
    }
}

/// Reads the `runs.json` written by [`emit_report`].
pub fn load_runs(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub const METRICS_HEADER: [&str; 6] = ["model", "mae", "rmse", "mape_percent", "n", "excluded_zero_targets"];

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

/// Writes `metrics.csv`, `runs.json`, a per-region MAE heat map per report
/// and one loss-curve image per named curve. Returns the written paths.
pub fn emit_report(reports: &[EvalReport], loss_curves: &[(String, Vec<f64>)], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to emit".into()));
    }
    for r in reports {
        if r.rmse + 1e-12 * r.rmse.abs() < r.mae {
            return Err(Error::Contract(format!("{}: RMSE {} below MAE {}", r.model, r.rmse, r.mae)));
        }
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let metrics = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics)?;
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        w.write_record([
            r.model.clone(),
            r.mae.to_string(),
            r.rmse.to_string(),
            r.mape_percent.to_string(),
            r.n.to_string(),
            r.excluded_zero_targets.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(metrics);

    let runs = dir.join("runs.json");
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&runs, json)?;
    written.push(runs);

    for r in reports {
        let path = dir.join(format!("heatmap_{}.png", file_stem(&r.model)));
        plot::heatmap(&r.region_mae, r.rows, r.cols).save(&path)?;
        written.push(path);
    }
    for (name, curve) in loss_curves {
        if curve.is_empty() {
            continue;
        }
        let path = dir.join(format!("loss_{}.png", file_stem(name)));
        plot::line_chart(curve).save(&path)?;
        written.push(path);
    }
    Ok(written)
}
