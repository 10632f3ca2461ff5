//! Binning raw order, trajectory and weather records into a [`CityCube`].
//!
//! The horizon starts at midnight of the earliest timestamp across all
//! inputs and covers every day up to the latest one. Records that touch a
//! cell outside the grid are skipped and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Timelike};
use log::warn;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::grid::{region_index, Channel, CityCube, GridSpec, MINUTES_PER_DAY};

#[derive(Debug, Clone, PartialEq)]
pub struct OrderRecord {
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub start_cell: (usize, usize),
    pub end_cell: (usize, usize),
    pub distance_km: f64,
    /// Parsed for completeness; supply comes from trajectories instead.
    pub served: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub vehicle_id: String,
    pub time: NaiveDateTime,
    pub cell: (usize, usize),
    pub speed_kmh: f64,
    pub available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weather {
    Sunny = 0,
    Rainy = 1,
    Cloudy = 2,
    Other = 3,
}

impl Weather {
    pub fn code(self) -> f64 {
        self as u8 as f64
    }

    pub fn parse(s: &str) -> Result<Weather> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sunny" => Ok(Weather::Sunny),
            "rainy" => Ok(Weather::Rainy),
            "cloudy" => Ok(Weather::Cloudy),
            "other" => Ok(Weather::Other),
            other => Err(Error::Data(format!("unknown weather condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeatherRecord {
    pub time: NaiveDateTime,
    pub condition: Weather,
}

/// Day/interval addressing relative to the first midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizon {
    pub origin: NaiveDate,
    pub days: usize,
}

impl Horizon {
    /// Smallest whole-day horizon containing every timestamp.
    pub fn covering(times: impl IntoIterator<Item = NaiveDateTime>) -> Result<Horizon> {
        let mut lo: Option<NaiveDateTime> = None;
        let mut hi: Option<NaiveDateTime> = None;
        for t in times {
            lo = Some(lo.map_or(t, |v| v.min(t)));
            hi = Some(hi.map_or(t, |v| v.max(t)));
        }
        let (lo, hi) = lo.zip(hi).ok_or_else(|| Error::Data("no timestamps in input".into()))?;
        let origin = lo.date();
        let days = (hi.date() - origin).num_days() as usize + 1;
        Ok(Horizon { origin, days })
    }

    /// `(day, interval)` of a timestamp, or `None` outside the horizon.
    pub fn slot(&self, t: NaiveDateTime, interval_minutes: usize) -> Option<(usize, usize)> {
        let day = (t.date() - self.origin).num_days();
        if day < 0 || day as usize >= self.days {
            return None;
        }
        let minute = (t.hour() * 60 + t.minute()) as usize;
        Some((day as usize, minute / interval_minutes))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub skipped_orders: usize,
    pub skipped_points: usize,
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.naive_utc())
        .map_err(|_| Error::Data(format!("bad timestamp {s:?}")))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Data(format!("bad boolean {other:?}"))),
    }
}

fn cell(grid: &GridSpec, (row, col): (usize, usize)) -> Option<usize> {
    region_index(row, col, grid).ok()
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

type Key = (usize, usize, usize);

/// Fills demand and both journey-distance channels. Journey-down is binned
/// by the trip's end time and cell.
pub fn bin_orders(records: &[OrderRecord], horizon: &Horizon, cube: &mut CityCube) -> usize {
    let grid = *cube.grid();
    let mut demand: BTreeMap<Key, usize> = BTreeMap::new();
    let mut up: BTreeMap<Key, Mean> = BTreeMap::new();
    let mut down: BTreeMap<Key, Mean> = BTreeMap::new();
    let mut skipped = 0;
    for r in records {
        let placed = (|| {
            let s = cell(&grid, r.start_cell)?;
            let e = cell(&grid, r.end_cell)?;
            let (sd, st) = horizon.slot(r.start_time, grid.interval_minutes)?;
            let (ed, et) = horizon.slot(r.end_time, grid.interval_minutes)?;
            Some(((sd, st, s), (ed, et, e)))
        })();
        let Some((start, end)) = placed else {
            skipped += 1;
            continue;
        };
        *demand.entry(start).or_default() += 1;
        up.entry(start).or_default().push(r.distance_km);
        down.entry(end).or_default().push(r.distance_km);
    }
    for ((d, t, x), n) in demand {
        cube.set(Channel::Demand, d, t, x, n as f64);
    }
    for ((d, t, x), m) in up {
        cube.set(Channel::JourneyUp, d, t, x, m.value());
    }
    for ((d, t, x), m) in down {
        cube.set(Channel::JourneyDown, d, t, x, m.value());
    }
    if skipped > 0 {
        warn!("skipped {skipped} order records outside the grid or horizon");
    }
    skipped
}

/// Fills speed (mean), volume (distinct vehicles) and supply (distinct
/// available vehicles).
pub fn bin_trajectories(points: &[TrajectoryPoint], horizon: &Horizon, cube: &mut CityCube) -> usize {
    let grid = *cube.grid();
    let mut speed: BTreeMap<Key, Mean> = BTreeMap::new();
    let mut seen: BTreeMap<Key, BTreeSet<&str>> = BTreeMap::new();
    let mut free: BTreeMap<Key, BTreeSet<&str>> = BTreeMap::new();
    let mut skipped = 0;
    for p in points {
        let key = cell(&grid, p.cell)
            .zip(horizon.slot(p.time, grid.interval_minutes))
            .map(|(x, (d, t))| (d, t, x));
        let Some(key) = key else {
            skipped += 1;
            continue;
        };
        speed.entry(key).or_default().push(p.speed_kmh);
        seen.entry(key).or_default().insert(&p.vehicle_id);
        if p.available {
            free.entry(key).or_default().insert(&p.vehicle_id);
        }
    }
    for ((d, t, x), m) in speed {
        cube.set(Channel::Speed, d, t, x, m.value());
    }
    for ((d, t, x), ids) in seen {
        cube.set(Channel::Volume, d, t, x, ids.len() as f64);
    }
    for ((d, t, x), ids) in free {
        cube.set(Channel::Supply, d, t, x, ids.len() as f64);
    }
    if skipped > 0 {
        warn!("skipped {skipped} trajectory points outside the grid or horizon");
    }
    skipped
}

/// Broadcasts one weather code per interval, forward-filling empty slots.
/// Within a slot the latest record wins.
pub fn encode_weather(records: &[WeatherRecord], horizon: &Horizon, cube: &mut CityCube) -> Result<()> {
    let grid = *cube.grid();
    let ipd = grid.intervals_per_day();
    let mut slots: Vec<Option<(NaiveDateTime, Weather)>> = vec![None; horizon.days * ipd];
    for r in records {
        if let Some((d, t)) = horizon.slot(r.time, grid.interval_minutes) {
            let cur = &mut slots[d * ipd + t];
            if cur.is_none_or(|(time, _)| r.time >= time) {
                *cur = Some((r.time, r.condition));
            }
        }
    }
    let mut last = None;
    for (k, slot) in slots.iter().enumerate() {
        if let Some((_, w)) = slot {
            last = Some(*w);
        }
        let w = last.ok_or_else(|| {
            Error::Data("no weather record at or before the first interval".into())
        })?;
        cube.slice_mut(Channel::Weather, k / ipd, k % ipd).fill(w.code());
    }
    Ok(())
}

#[derive(Deserialize)]
struct OrderRow {
    start_time: String,
    end_time: String,
    start_row: usize,
    start_col: usize,
    end_row: usize,
    end_col: usize,
    distance_km: f64,
    served: String,
}

#[derive(Deserialize)]
struct TrajectoryRow {
    vehicle_id: String,
    time: String,
    row: usize,
    col: usize,
    speed_kmh: f64,
    available: String,
}

#[derive(Deserialize)]
struct WeatherRow {
    time: String,
    condition: String,
}

fn rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<(usize, T)>> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    csv.deserialize()
        .enumerate()
        .map(|(i, r)| Ok((i + 2, r?)))
        .collect()
}

pub fn read_orders<R: Read>(reader: R) -> Result<Vec<OrderRecord>> {
    rows::<OrderRow, _>(reader)?
        .into_iter()
        .map(|(line, r)| {
            let rec = OrderRecord {
                start_time: parse_timestamp(&r.start_time)?,
                end_time: parse_timestamp(&r.end_time)?,
                start_cell: (r.start_row, r.start_col),
                end_cell: (r.end_row, r.end_col),
                distance_km: r.distance_km,
                served: parse_bool(&r.served)?,
            };
            if rec.end_time < rec.start_time {
                return Err(Error::Data(format!("orders line {line}: end_time before start_time")));
            }
            if rec.distance_km.is_nan() || rec.distance_km < 0.0 {
                return Err(Error::Data(format!("orders line {line}: negative distance")));
            }
            Ok(rec)
        })
        .collect()
}

pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<TrajectoryPoint>> {
    rows::<TrajectoryRow, _>(reader)?
        .into_iter()
        .map(|(line, r)| {
            if r.speed_kmh.is_nan() || r.speed_kmh < 0.0 {
                return Err(Error::Data(format!("trajectories line {line}: negative speed")));
            }
            Ok(TrajectoryPoint {
                vehicle_id: r.vehicle_id,
                time: parse_timestamp(&r.time)?,
                cell: (r.row, r.col),
                speed_kmh: r.speed_kmh,
                available: parse_bool(&r.available)?,
            })
        })
        .collect()
}

pub fn read_weather<R: Read>(reader: R) -> Result<Vec<WeatherRecord>> {
    rows::<WeatherRow, _>(reader)?
        .into_iter()
        .map(|(_, r)| Ok(WeatherRecord { time: parse_timestamp(&r.time)?, condition: Weather::parse(&r.condition)? }))
        .collect()
}

/// Assembles a cube from in-memory records.
pub fn build_cube(
    grid: GridSpec,
    orders: &[OrderRecord],
    points: &[TrajectoryPoint],
    weather: &[WeatherRecord],
) -> Result<(CityCube, IngestReport)> {
    grid.validate()?;
    if !MINUTES_PER_DAY.is_multiple_of(grid.interval_minutes) {
        return Err(Error::Config("interval must divide the day".into()));
    }
    let horizon = Horizon::covering(
        orders
            .iter()
            .flat_map(|o| [o.start_time, o.end_time])
            .chain(points.iter().map(|p| p.time))
            .chain(weather.iter().map(|w| w.time)),
    )?;
    let mut cube = CityCube::zeros(grid, horizon.days)?;
    let skipped_orders = bin_orders(orders, &horizon, &mut cube);
    let skipped_points = bin_trajectories(points, &horizon, &mut cube);
    encode_weather(weather, &horizon, &mut cube)?;
    cube.recompute_gap();
    Ok((cube, IngestReport { skipped_orders, skipped_points }))
}

pub fn ingest_files(
    grid: GridSpec,
    orders: impl AsRef<Path>,
    trajectories: impl AsRef<Path>,
    weather: impl AsRef<Path>,
) -> Result<(CityCube, IngestReport)> {
    let open = |p: &Path| std::fs::File::open(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())));
    let orders = read_orders(open(orders.as_ref())?)?;
    let points = read_trajectories(open(trajectories.as_ref())?)?;
    let weather = read_weather(open(weather.as_ref())?)?;
    build_cube(grid, &orders, &points, &weather)
}
