//! Synthetic city generator with planted semantic clusters.
//!
//! Each region belongs to a cluster with its own daily wavelet. Demand is
//! `baseline + region offset + wavelet + noise`; supply is
//! `supply_ratio × demand one interval earlier + noise`; the remaining
//! channels are monotone transforms of demand with independent noise.
//! Randomness comes from ChaCha8 seeded with `seed`; day `d` draws from
//! stream `d + 1` so days can be generated independently.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{Channel, CityCube, GridSpec, WEATHER_CATEGORIES};
use crate::semantic::{acf_vector, dot};

/// Daily sinusoid `amplitude · sin(2π · harmonic · t / P + phase)` with
/// `harmonic` full cycles per day of `P` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wavelet {
    pub amplitude: f64,
    pub phase: f64,
    pub harmonic: usize,
}

impl Wavelet {
    pub fn value(&self, slot: f64, period: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.harmonic as f64 * slot / period + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub cluster_count: usize,
    /// Per-cluster wavelets; when empty, cluster `c` cycles `c + 1` times a
    /// day with `amplitude` and phase `c`.
    pub wavelets: Vec<Wavelet>,
    pub amplitude: f64,
    pub baseline: f64,
    /// Standard deviation of the per-region demand offset.
    pub offset_std: f64,
    pub noise_std: f64,
    pub supply_ratio: f64,
    pub daily_shift_minutes: usize,
    pub seed: u64,
    pub days: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            cluster_count: 3,
            wavelets: Vec::new(),
            amplitude: 5.0,
            baseline: 20.0,
            offset_std: 0.5,
            noise_std: 0.25,
            supply_ratio: 0.7,
            daily_shift_minutes: 0,
            seed: 42,
            days: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        grid.validate()?;
        if self.cluster_count == 0 || self.cluster_count > grid.regions() {
            return Err(Error::Config(format!(
                "cluster_count {} must lie in 1..={}",
                self.cluster_count,
                grid.regions()
            )));
        }
        if !self.wavelets.is_empty() && self.wavelets.len() != self.cluster_count {
            return Err(Error::Config(format!(
                "{} wavelets given for {} clusters",
                self.wavelets.len(),
                self.cluster_count
            )));
        }
        if self.wavelets.iter().any(|w| w.harmonic == 0) {
            return Err(Error::Config("wavelet harmonic must be >= 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.offset_std >= 0.0) {
            return Err(Error::Config("noise_std and offset_std must be >= 0".into()));
        }
        if self.days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cluster_wavelets(&self) -> Vec<Wavelet> {
        if !self.wavelets.is_empty() {
            return self.wavelets.clone();
        }
        (0..self.cluster_count)
            .map(|c| Wavelet { amplitude: self.amplitude, phase: c as f64, harmonic: c + 1 })
            .collect()
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("std validated >= 0")
}

struct DayDraw {
    demand: Vec<f64>,
    supply_noise: Vec<f64>,
    speed: Vec<f64>,
    volume: Vec<f64>,
    ju: Vec<f64>,
    jd: Vec<f64>,
    weather: f64,
}

/// Builds a cube and the cluster label of every region.
pub fn generate(config: &SyntheticConfig, grid: &GridSpec) -> Result<(CityCube, Vec<usize>)> {
    generate_with(config, grid, Execution::default())
}

pub fn generate_with(config: &SyntheticConfig, grid: &GridSpec, exec: Execution) -> Result<(CityCube, Vec<usize>)> {
    config.validate(grid)?;
    let n = grid.regions();
    let ipd = grid.intervals_per_day();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![0; n];
    for (i, &r) in order.iter().enumerate() {
        labels[r] = i % config.cluster_count;
    }
    let offset_dist = normal(config.offset_std);
    let offsets: Vec<f64> = (0..n).map(|_| offset_dist.sample(&mut rng)).collect();

    let wavelets = config.cluster_wavelets();
    let profile: Vec<Vec<f64>> = wavelets
        .iter()
        .map(|w| (0..ipd).map(|t| w.value(t as f64, ipd as f64)).collect())
        .collect();

    let draws = exec.map_range(config.days, |day| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(day as u64 + 1);
        let noise = normal(config.noise_std);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| noise.sample(&mut rng)).collect() };
        let len = ipd * n;
        let mut demand = draw(len);
        for t in 0..ipd {
            for r in 0..n {
                demand[t * n + r] += config.baseline + offsets[r] + profile[labels[r]][t];
            }
        }
        let supply_noise = draw(len);
        let mut speed = draw(len);
        let mut volume = draw(len);
        let mut ju = draw(len);
        let mut jd = draw(len);
        for k in 0..len {
            let d = demand[k];
            speed[k] += 60.0 - 1.5 * d;
            volume[k] += 2.0 + 1.2 * d;
            ju[k] += 3.0 + 0.2 * d;
            jd[k] += 2.5 + 0.15 * d;
        }
        let weather = rng.random_range(0..WEATHER_CATEGORIES) as f64;
        DayDraw { demand, supply_noise, speed, volume, ju, jd, weather }
    });

    let mut cube = CityCube::zeros(*grid, config.days)?;
    for (day, d) in draws.iter().enumerate() {
        for t in 0..ipd {
            for r in 0..n {
                let k = t * n + r;
                let prev = if t > 0 {
                    d.demand[k - n]
                } else if day > 0 {
                    draws[day - 1].demand[(ipd - 1) * n + r]
                } else {
                    d.demand[(ipd - 1) * n + r]
                };
                let supply = config.supply_ratio * prev + d.supply_noise[k];
                cube.set(Channel::Demand, day, t, r, d.demand[k]);
                cube.set(Channel::Supply, day, t, r, supply);
                cube.set(Channel::Gap, day, t, r, d.demand[k] - supply);
                cube.set(Channel::Speed, day, t, r, d.speed[k]);
                cube.set(Channel::Volume, day, t, r, d.volume[k]);
                cube.set(Channel::JourneyUp, day, t, r, d.ju[k]);
                cube.set(Channel::JourneyDown, day, t, r, d.jd[k]);
                cube.set(Channel::Weather, day, t, r, d.weather);
            }
        }
    }
    let cube = if config.daily_shift_minutes > 0 {
        inject_shift(&cube, config.daily_shift_minutes)
    } else {
        cube
    };
    Ok((cube, labels))
}

/// Delays day `k` by `k × minutes_per_day` (rounded to whole intervals),
/// rotating each day's series within the day.
pub fn inject_shift(cube: &CityCube, minutes_per_day: usize) -> CityCube {
    let ipd = cube.intervals_per_day();
    let slots = (minutes_per_day as f64 / cube.grid().interval_minutes as f64).round() as usize;
    let mut out = cube.clone();
    for day in 0..cube.days() {
        let shift = (day * slots) % ipd;
        if shift == 0 {
            continue;
        }
        for ch in Channel::ALL {
            for t in 0..ipd {
                let src = (t + ipd - shift) % ipd;
                out.slice_mut(ch, day, t).copy_from_slice(cube.slice(ch, day, src));
            }
        }
    }
    out
}

/// Leave-one-out 1-nearest-neighbour accuracy of `labels` when regions are
/// compared by the dot product of their demand autocorrelation vectors
/// (all days concatenated, lags `0..=lags`).
pub fn cluster_recovery(cube: &CityCube, labels: &[usize], lags: usize) -> Result<f64> {
    let n = cube.grid().regions();
    if labels.len() != n || n < 2 {
        return Err(Error::Contract(format!("{} labels for {n} regions", labels.len())));
    }
    let acfs = demand_acfs(cube, lags)?;
    let mut correct = 0;
    for i in 0..n {
        let best = (0..n)
            .filter(|&j| j != i)
            .max_by(|&a, &b| dot(&acfs[i], &acfs[a]).total_cmp(&dot(&acfs[i], &acfs[b])))
            .expect("n >= 2");
        if labels[best] == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Demand autocorrelation vector of every region over the whole cube.
pub fn demand_acfs(cube: &CityCube, lags: usize) -> Result<Vec<Vec<f64>>> {
    let ipd = cube.intervals_per_day();
    (0..cube.grid().regions())
        .map(|r| {
            let series: Vec<f64> = (0..cube.days())
                .flat_map(|d| (0..ipd).map(move |t| (d, t)))
                .map(|(d, t)| cube.at(Channel::Demand, d, t, r))
                .collect();
            Ok(acf_vector(&series, lags)?.0)
        })
        .collect()
}

/// Writes `region_index,cluster_id` rows.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["region_index", "cluster_id"])?;
    for (r, c) in labels.iter().enumerate() {
        w.write_record([r.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec { rows: 6, cols: 5, ..GridSpec::default() }
    }

    #[test]
    fn noiseless_single_cluster_is_uniform() {
        let cfg = SyntheticConfig { cluster_count: 1, noise_std: 0.0, offset_std: 0.0, days: 2, ..Default::default() };
        let (cube, labels) = generate(&cfg, &grid()).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
        for d in 0..2 {
            for t in 0..cube.intervals_per_day() {
                let s = cube.slice(Channel::Demand, d, t);
                assert!(s.iter().all(|&v| v == s[0]));
            }
        }
    }

    #[test]
    fn same_seed_same_cube() {
        let cfg = SyntheticConfig { days: 3, ..Default::default() };
        let (a, la) = generate_with(&cfg, &grid(), Execution::Sequential).unwrap();
        let (b, lb) = generate_with(&cfg, &grid(), Execution::Parallel).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la, lb);
        let other = SyntheticConfig { seed: 7, ..cfg };
        assert_ne!(generate(&other, &grid()).unwrap().0.to_bytes(), a.to_bytes());
    }

    #[test]
    fn gap_is_demand_minus_supply() {
        let (cube, _) = generate(&SyntheticConfig { days: 2, ..Default::default() }, &grid()).unwrap();
        assert_eq!(cube.gap_residual(), 0.0);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let cfg = SyntheticConfig { cluster_count: 31, ..Default::default() };
        assert!(matches!(generate(&cfg, &grid()), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_gap_is_daily_periodic() {
        let cfg = SyntheticConfig { noise_std: 0.0, offset_std: 0.0, days: 3, ..Default::default() };
        let (cube, _) = generate(&cfg, &grid()).unwrap();
        for d in 1..3 {
            for t in 0..cube.intervals_per_day() {
                assert_eq!(cube.slice(Channel::Gap, d, t), cube.slice(Channel::Gap, 0, t));
            }
        }
    }

    #[test]
    fn shift_cases() {
        let (cube, _) = generate(&SyntheticConfig { days: 3, ..Default::default() }, &grid()).unwrap();
        assert_eq!(inject_shift(&cube, 0), cube);
        let shifted = inject_shift(&cube, 30);
        let ipd = cube.intervals_per_day();
        for t in 0..ipd {
            assert_eq!(shifted.slice(Channel::Demand, 2, (t + 2) % ipd), cube.slice(Channel::Demand, 2, t));
            assert_eq!(shifted.slice(Channel::Demand, 0, t), cube.slice(Channel::Demand, 0, t));
        }
        let cfg = SyntheticConfig { noise_std: 0.0, days: 3, ..Default::default() };
        let (clean, _) = generate(&cfg, &grid()).unwrap();
        assert_eq!(inject_shift(&clean, 24 * 60), clean);
    }

    #[test]
    fn within_cluster_similarity_exceeds_cross_cluster() {
        let cfg = SyntheticConfig { noise_std: 0.01, days: 2, ..Default::default() };
        let (cube, labels) = generate(&cfg, &grid()).unwrap();
        let acfs = demand_acfs(&cube, 12).unwrap();
        let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for i in 0..acfs.len() {
            for j in i + 1..acfs.len() {
                let v = dot(&acfs[i], &acfs[j]);
                if labels[i] == labels[j] {
                    within += v;
                    nw += 1;
                } else {
                    cross += v;
                    nc += 1;
                }
            }
        }
        assert!(within / nw as f64 > cross / nc as f64);
    }
}
