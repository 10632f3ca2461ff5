//! Normalized cube plus per-window autocorrelation cache and sample indexing.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{normalize, Channel, CityCube, GridSpec, NormalizationStats};
use crate::semantic::WindowAcf;

/// One prediction target: region `region`, window `start..start + T` of day
/// `day`, label = normalized gap at interval `start + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleWindow {
    pub region: usize,
    pub day: usize,
    pub start: usize,
    pub label: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    cube: CityCube,
    stats: NormalizationStats,
    acf: Vec<WindowAcf>,
}

impl Dataset {
    /// Wraps an already-normalized cube.
    pub fn new(normalized: CityCube, stats: NormalizationStats, exec: Execution) -> Result<Self> {
        let grid = *normalized.grid();
        let starts = grid.window_starts();
        let keys: Vec<(usize, usize)> = (0..normalized.days())
            .flat_map(|d| (0..starts).map(move |s| (d, s)))
            .collect();
        let acf = exec
            .map(&keys, |&(d, s)| WindowAcf::from_cube(&normalized, d, s, grid.window, grid.acf_lags))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { cube: normalized, stats, acf })
    }

    /// Normalizes `raw` with statistics from `train_days`.
    pub fn from_raw(raw: &CityCube, train_days: Range<usize>, exec: Execution) -> Result<Self> {
        let (cube, stats) = normalize(raw, train_days)?;
        Dataset::new(cube, stats, exec)
    }

    /// Applies existing statistics (e.g. from a checkpoint) to `raw`.
    pub fn with_stats(raw: &CityCube, stats: NormalizationStats, exec: Execution) -> Result<Self> {
        Dataset::new(stats.apply(raw), stats, exec)
    }

    pub fn cube(&self) -> &CityCube {
        &self.cube
    }

    pub fn grid(&self) -> &GridSpec {
        self.cube.grid()
    }

    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }

    pub fn days(&self) -> usize {
        self.cube.days()
    }

    pub fn window_acf(&self, day: usize, start: usize) -> &WindowAcf {
        &self.acf[day * self.grid().window_starts() + start]
    }

    /// Region-major normalized gap values over one window.
    pub fn gap_window(&self, day: usize, start: usize) -> Vec<f64> {
        let g = self.grid();
        let (n, t) = (g.regions(), g.window);
        let mut out = vec![0.0; n * t];
        for j in 0..t {
            for (i, &v) in self.cube.slice(Channel::Gap, day, start + j).iter().enumerate() {
                out[i * t + j] = v;
            }
        }
        out
    }

    pub fn label(&self, region: usize, day: usize, start: usize) -> f64 {
        self.cube.at(Channel::Gap, day, start + self.grid().window, region)
    }

    pub fn sample(&self, region: usize, day: usize, start: usize) -> Result<SampleWindow> {
        let g = self.grid();
        if region >= g.regions() || day >= self.days() || start >= g.window_starts() {
            return Err(Error::Bounds(format!(
                "sample region {region} day {day} start {start} outside the dataset"
            )));
        }
        Ok(SampleWindow { region, day, start, label: self.label(region, day, start) })
    }

    /// Every (region, window) position whose label day lies in `days` and
    /// that has `history` days of data ending on it.
    pub fn samples(&self, days: Range<usize>, history: usize) -> Vec<SampleWindow> {
        let g = *self.grid();
        let mut out = Vec::new();
        for day in days.start.max(history.saturating_sub(1))..days.end.min(self.days()) {
            for start in 0..g.window_starts() {
                for region in 0..g.regions() {
                    out.push(SampleWindow { region, day, start, label: self.label(region, day, start) });
                }
            }
        }
        out
    }
}
