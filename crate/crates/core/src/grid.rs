//! Gridded city data model: grid geometry, the dense signal cube, patch
//! extraction, min-max normalization and chronological splitting.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MINUTES_PER_DAY: usize = 24 * 60;

/// Number of weather categories (sunny, rainy, cloudy, other).
pub const WEATHER_CATEGORIES: usize = 4;

const CUBE_MAGIC: &[u8; 9] = b"ARLPCUBE1";

/// City discretization plus the windowing hyperparameters shared by every model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub interval_minutes: usize,
    /// Side of the square neighborhood fed to the spatial encoders (odd).
    pub neighborhood: usize,
    /// Intervals per input window.
    pub window: usize,
    /// Days of history for the multi-day model.
    pub history_days: usize,
    /// Highest autocorrelation lag.
    pub acf_lags: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 20,
            cols: 10,
            interval_minutes: 30,
            neighborhood: 5,
            window: 5,
            history_days: 5,
            acf_lags: default_acf_lags(5),
        }
    }
}

/// Lag count used when none is configured: `min(4, window - 2)`.
pub fn default_acf_lags(window: usize) -> usize {
    4.min(window.saturating_sub(2))
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs at least one row and one column".into()));
        }
        if self.neighborhood == 0 || self.neighborhood.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "neighborhood must be odd and >= 1, got {}",
                self.neighborhood
            )));
        }
        if self.window < 3 {
            return Err(Error::Config(format!("window must be >= 3, got {}", self.window)));
        }
        if self.history_days == 0 {
            return Err(Error::Config("history_days must be >= 1".into()));
        }
        if self.acf_lags > self.window - 2 {
            return Err(Error::Config(format!(
                "acf_lags {} exceeds window - 2 = {}",
                self.acf_lags,
                self.window - 2
            )));
        }
        if self.interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(self.interval_minutes) {
            return Err(Error::Config(format!(
                "interval_minutes {} must divide a day",
                self.interval_minutes
            )));
        }
        if self.intervals_per_day() < self.window + 1 {
            return Err(Error::Config(format!(
                "a day has {} intervals, fewer than window + 1 = {}",
                self.intervals_per_day(),
                self.window + 1
            )));
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn intervals_per_day(&self) -> usize {
        MINUTES_PER_DAY / self.interval_minutes
    }

    /// Valid window start offsets within one day (the label interval must exist).
    pub fn window_starts(&self) -> usize {
        self.intervals_per_day() - self.window
    }
}

/// Row-major linear index of a cell.
pub fn region_index(row: usize, col: usize, grid: &GridSpec) -> Result<usize> {
    if row >= grid.rows || col >= grid.cols {
        return Err(Error::Bounds(format!(
            "cell ({row}, {col}) outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    Ok(row * grid.cols + col)
}

pub fn region_coords(index: usize, grid: &GridSpec) -> Result<(usize, usize)> {
    if index >= grid.regions() {
        return Err(Error::Bounds(format!(
            "region {index} outside grid of {} regions",
            grid.regions()
        )));
    }
    Ok((index / grid.cols, index % grid.cols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Weather,
    Speed,
    Volume,
    JourneyUp,
    JourneyDown,
    Demand,
    Supply,
    Gap,
}

impl Channel {
    pub const COUNT: usize = 8;

    pub const ALL: [Channel; Channel::COUNT] = [
        Channel::Weather,
        Channel::Speed,
        Channel::Volume,
        Channel::JourneyUp,
        Channel::JourneyDown,
        Channel::Demand,
        Channel::Supply,
        Channel::Gap,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Weather => "weather",
            Channel::Speed => "speed",
            Channel::Volume => "volume",
            Channel::JourneyUp => "journey_up",
            Channel::JourneyDown => "journey_down",
            Channel::Demand => "demand",
            Channel::Supply => "supply",
            Channel::Gap => "gap",
        }
    }

    pub fn is_categorical(self) -> bool {
        self == Channel::Weather
    }
}

/// Dense store of every signal, indexed `[channel][day][interval][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CityCube {
    grid: GridSpec,
    days: usize,
    /// Absolute index of the first stored day, kept across splits.
    start_day: usize,
    values: Vec<f64>,
}

impl CityCube {
    pub fn zeros(grid: GridSpec, days: usize) -> Result<Self> {
        grid.validate()?;
        if days == 0 {
            return Err(Error::Config("cube needs at least one day".into()));
        }
        let len = Channel::COUNT * days * grid.intervals_per_day() * grid.regions();
        Ok(CityCube { grid, days, start_day: 0, values: vec![0.0; len] })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn days(&self) -> usize {
        self.days
    }

    pub fn start_day(&self) -> usize {
        self.start_day
    }

    pub fn intervals_per_day(&self) -> usize {
        self.grid.intervals_per_day()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn offset(&self, channel: Channel, day: usize, interval: usize, region: usize) -> usize {
        ((channel.index() * self.days + day) * self.grid.intervals_per_day() + interval)
            * self.grid.regions()
            + region
    }

    fn check(&self, day: usize, interval: usize, region: usize) -> Result<()> {
        if day >= self.days {
            return Err(Error::Bounds(format!("day {day} >= {}", self.days)));
        }
        if interval >= self.intervals_per_day() {
            return Err(Error::Bounds(format!(
                "interval {interval} >= {}",
                self.intervals_per_day()
            )));
        }
        if region >= self.grid.regions() {
            return Err(Error::Bounds(format!("region {region} >= {}", self.grid.regions())));
        }
        Ok(())
    }

    pub fn get(&self, channel: Channel, day: usize, interval: usize, region: usize) -> Result<f64> {
        self.check(day, interval, region)?;
        Ok(self.values[self.offset(channel, day, interval, region)])
    }

    /// Unchecked-by-Result accessor for hot loops; panics on bad indices.
    #[inline]
    pub fn at(&self, channel: Channel, day: usize, interval: usize, region: usize) -> f64 {
        self.values[self.offset(channel, day, interval, region)]
    }

    #[inline]
    pub fn set(&mut self, channel: Channel, day: usize, interval: usize, region: usize, v: f64) {
        let o = self.offset(channel, day, interval, region);
        self.values[o] = v;
    }

    /// All regions of one (channel, day, interval) slice.
    pub fn slice(&self, channel: Channel, day: usize, interval: usize) -> &[f64] {
        let o = self.offset(channel, day, interval, 0);
        &self.values[o..o + self.grid.regions()]
    }

    pub fn slice_mut(&mut self, channel: Channel, day: usize, interval: usize) -> &mut [f64] {
        let o = self.offset(channel, day, interval, 0);
        let n = self.grid.regions();
        &mut self.values[o..o + n]
    }

    /// `len` consecutive values of one region starting at `start`.
    pub fn series(&self, channel: Channel, day: usize, region: usize, start: usize, len: usize) -> Vec<f64> {
        (start..start + len).map(|t| self.at(channel, day, t, region)).collect()
    }

    /// Recomputes the gap channel as demand minus supply.
    pub fn recompute_gap(&mut self) {
        let ipd = self.intervals_per_day();
        for d in 0..self.days {
            for t in 0..ipd {
                for r in 0..self.grid.regions() {
                    let g = self.at(Channel::Demand, d, t, r) - self.at(Channel::Supply, d, t, r);
                    self.set(Channel::Gap, d, t, r, g);
                }
            }
        }
    }

    /// Largest |gap - (demand - supply)| over the cube.
    pub fn gap_residual(&self) -> f64 {
        let ipd = self.intervals_per_day();
        let mut worst: f64 = 0.0;
        for d in 0..self.days {
            for t in 0..ipd {
                for r in 0..self.grid.regions() {
                    let expect = self.at(Channel::Demand, d, t, r) - self.at(Channel::Supply, d, t, r);
                    worst = worst.max((self.at(Channel::Gap, d, t, r) - expect).abs());
                }
            }
        }
        worst
    }

    /// Copy of a contiguous range of days.
    pub fn sub_days(&self, days: Range<usize>) -> Result<CityCube> {
        if days.start >= days.end || days.end > self.days {
            return Err(Error::Bounds(format!(
                "day range {days:?} invalid for a {}-day cube",
                self.days
            )));
        }
        let n = days.len();
        let per_day = self.intervals_per_day() * self.grid.regions();
        let mut values = Vec::with_capacity(Channel::COUNT * n * per_day);
        for ch in Channel::ALL {
            let a = self.offset(ch, days.start, 0, 0);
            values.extend_from_slice(&self.values[a..a + n * per_day]);
        }
        Ok(CityCube { grid: self.grid, days: n, start_day: self.start_day + days.start, values })
    }

    /// Replaces the grid's model hyperparameters (window, neighborhood, ...)
    /// while keeping the geometry.
    pub fn with_grid(mut self, grid: GridSpec) -> Result<CityCube> {
        grid.validate()?;
        if grid.rows != self.grid.rows
            || grid.cols != self.grid.cols
            || grid.interval_minutes != self.grid.interval_minutes
        {
            return Err(Error::Config(format!(
                "grid {}x{}@{}min does not match cube {}x{}@{}min",
                grid.rows,
                grid.cols,
                grid.interval_minutes,
                self.grid.rows,
                self.grid.cols,
                self.grid.interval_minutes
            )));
        }
        self.grid = grid;
        Ok(self)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CUBE_MAGIC)?;
        let g = &self.grid;
        for v in [
            g.rows,
            g.cols,
            g.interval_minutes,
            g.neighborhood,
            g.window,
            g.history_days,
            g.acf_lags,
            Channel::COUNT,
            self.days,
            g.intervals_per_day(),
            self.start_day,
        ] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<CityCube> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("cube file shorter than its header".into()))?;
        if &magic != CUBE_MAGIC {
            return Err(Error::Format("missing ARLPCUBE1 magic".into()));
        }
        let mut fields = [0usize; 11];
        for f in fields.iter_mut() {
            *f = read_u64(&mut r)? as usize;
        }
        let [rows, cols, interval_minutes, neighborhood, window, history_days, acf_lags, channels, days, ipd, start_day] =
            fields;
        let grid = GridSpec { rows, cols, interval_minutes, neighborhood, window, history_days, acf_lags };
        grid.validate().map_err(|e| Error::Format(format!("cube header: {e}")))?;
        if channels != Channel::COUNT || ipd != grid.intervals_per_day() {
            return Err(Error::Format(format!(
                "cube header declares {channels} channels and {ipd} intervals per day"
            )));
        }
        if days == 0 {
            return Err(Error::Format("cube header declares zero days".into()));
        }
        let len = Channel::COUNT * days * ipd * grid.regions();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("cube file truncated".into()))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite cube value at offset {bad}")));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after cube payload".into()));
        }
        Ok(CityCube { grid, days, start_day, values })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 88 + self.values.len() * 8);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CityCube> {
        CityCube::read_from(BufReader::new(File::open(path)?))
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(b))
}

/// `s`×`s` neighborhood of `center` (row-major), zero outside the grid.
pub fn extract_patch(
    cube: &CityCube,
    channel: Channel,
    day: usize,
    interval: usize,
    center: usize,
    s: usize,
) -> Result<Vec<f64>> {
    cube.check(day, interval, center)?;
    if s.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size must be odd, got {s}")));
    }
    let mut out = vec![0.0; s * s];
    fill_patch(cube.slice(channel, day, interval), cube.grid(), center, s, &mut out);
    Ok(out)
}

/// Writes the patch around `center` from one interval slice into `out`.
pub(crate) fn fill_patch(slice: &[f64], grid: &GridSpec, center: usize, s: usize, out: &mut [f64]) {
    let half = (s / 2) as isize;
    let (cr, cc) = ((center / grid.cols) as isize, (center % grid.cols) as isize);
    for pr in 0..s {
        let r = cr + pr as isize - half;
        for pc in 0..s {
            let c = cc + pc as isize - half;
            out[pr * s + pc] = if r >= 0 && c >= 0 && (r as usize) < grid.rows && (c as usize) < grid.cols {
                slice[r as usize * grid.cols + c as usize]
            } else {
                0.0
            };
        }
    }
}

/// Per-channel min/max of a training slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: [f64; Channel::COUNT],
    pub max: [f64; Channel::COUNT],
}

impl NormalizationStats {
    /// Identity scaling (min 0, max 1) for every channel.
    pub fn identity() -> Self {
        NormalizationStats { min: [0.0; Channel::COUNT], max: [1.0; Channel::COUNT] }
    }

    pub fn fit(cube: &CityCube, days: Range<usize>) -> Result<Self> {
        if days.is_empty() || days.end > cube.days() {
            return Err(Error::Config(format!(
                "training slice {days:?} empty or outside the {}-day cube",
                cube.days()
            )));
        }
        let mut min = [0.0; Channel::COUNT];
        let mut max = [0.0; Channel::COUNT];
        for ch in Channel::ALL {
            if ch.is_categorical() {
                continue;
            }
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for d in days.clone() {
                for t in 0..cube.intervals_per_day() {
                    for &v in cube.slice(ch, d, t) {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            min[ch.index()] = lo;
            max[ch.index()] = hi;
        }
        Ok(NormalizationStats { min, max })
    }

    #[inline]
    pub fn normalize_value(&self, channel: Channel, v: f64) -> f64 {
        if channel.is_categorical() {
            return v;
        }
        let (lo, hi) = (self.min[channel.index()], self.max[channel.index()]);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    #[inline]
    pub fn denormalize_value(&self, channel: Channel, v: f64) -> f64 {
        if channel.is_categorical() {
            return v;
        }
        let (lo, hi) = (self.min[channel.index()], self.max[channel.index()]);
        if hi > lo {
            v * (hi - lo) + lo
        } else {
            lo
        }
    }

    /// Applies the scaling to every day of `cube`. Values outside the fitted
    /// range are not clipped.
    pub fn apply(&self, cube: &CityCube) -> CityCube {
        let mut out = cube.clone();
        let per_channel = cube.days * cube.intervals_per_day() * cube.grid.regions();
        for ch in Channel::ALL {
            let a = ch.index() * per_channel;
            for v in &mut out.values[a..a + per_channel] {
                *v = self.normalize_value(ch, *v);
            }
        }
        out
    }
}

/// Min-max normalizes every non-categorical channel with statistics from
/// `train_days`.
pub fn normalize(cube: &CityCube, train_days: Range<usize>) -> Result<(CityCube, NormalizationStats)> {
    let stats = NormalizationStats::fit(cube, train_days)?;
    Ok((stats.apply(cube), stats))
}

/// Chronological day split for a `train:test` ratio.
pub fn split_days(days: usize, ratio: (u32, u32)) -> Result<(Range<usize>, Range<usize>)> {
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::Config(format!("split ratio {a}:{b} leaves one side empty")));
    }
    let train = ((days as f64) * a as f64 / (a + b) as f64).round() as usize;
    if train == 0 || train >= days {
        return Err(Error::Config(format!(
            "{days} days cannot be split {a}:{b} with both parts non-empty"
        )));
    }
    Ok((0..train, train..days))
}

pub fn split_by_time(cube: &CityCube, ratio: (u32, u32)) -> Result<(CityCube, CityCube)> {
    let (train, test) = split_days(cube.days(), ratio)?;
    Ok((cube.sub_days(train)?, cube.sub_days(test)?))
}
