//! Semantic component: autocorrelation signatures, four-channel similarity
//! fusion with learned 1×1 weights, hard/sample attention and synthesis of
//! one gap series from semantically similar regions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Channel, CityCube, GridSpec};

/// Guard below which `|sd_k|` is treated as zero.
pub const SD_EPSILON: f64 = 1e-8;

/// Default hard-attention threshold factor.
pub const DEFAULT_BETA: f64 = 0.9;

/// Channels compared when measuring similarity, in weight order.
pub const SIMILARITY_CHANNELS: [Channel; 4] =
    [Channel::Demand, Channel::Supply, Channel::JourneyUp, Channel::JourneyDown];

/// Autocorrelation coefficients `r_0..=r_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcfVector(pub Vec<f64>);

impl AcfVector {
    pub fn dot(&self, other: &AcfVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn acf_vector(series: &[f64], lags: usize) -> Result<AcfVector> {
    if series.len() < 3 {
        return Err(Error::Contract(format!(
            "autocorrelation needs >= 3 points, got {}",
            series.len()
        )));
    }
    if lags + 2 > series.len() {
        return Err(Error::Contract(format!(
            "{lags} lags exceed series length {} - 2",
            series.len()
        )));
    }
    let mut out = vec![0.0; lags + 1];
    acf_into(series, &mut out);
    Ok(AcfVector(out))
}

/// Fills `out[h]` with the lag-`h` autocorrelation. A constant series gives
/// `(1, 0, ..., 0)`.
pub(crate) fn acf_into(series: &[f64], out: &mut [f64]) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let denom: f64 = series.iter().map(|x| (x - mean) * (x - mean)).sum();
    out.iter_mut().for_each(|v| *v = 0.0);
    out[0] = 1.0;
    // Relative test so that float noise around a constant still counts as constant.
    let scale = series.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    if denom <= 1e-24 * scale * scale * n {
        return;
    }
    for (h, r) in out.iter_mut().enumerate().skip(1) {
        let num: f64 = series
            .iter()
            .zip(&series[h..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum();
        *r = num / denom;
    }
}

/// Autocorrelation vectors of every region for the four similarity channels
/// over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowAcf {
    lags: usize,
    regions: usize,
    /// `[region][channel][lag]`
    data: Vec<f64>,
}

impl WindowAcf {
    pub fn from_cube(cube: &CityCube, day: usize, start: usize, window: usize, lags: usize) -> Result<Self> {
        if start + window > cube.intervals_per_day() || day >= cube.days() {
            return Err(Error::Bounds(format!(
                "window day {day} start {start} len {window} outside cube"
            )));
        }
        if window < 3 || lags + 2 > window {
            return Err(Error::Contract(format!("window {window} cannot carry {lags} lags")));
        }
        let regions = cube.grid().regions();
        let width = lags + 1;
        let mut data = vec![0.0; regions * 4 * width];
        let mut buf = vec![0.0; window];
        for r in 0..regions {
            for (c, &ch) in SIMILARITY_CHANNELS.iter().enumerate() {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = cube.at(ch, day, start + j, r);
                }
                let o = (r * 4 + c) * width;
                acf_into(&buf, &mut data[o..o + width]);
            }
        }
        Ok(WindowAcf { lags, regions, data })
    }

    /// Builds from per-channel series: `series[c][region]` is a window-length slice.
    pub fn from_series(series: [&[Vec<f64>]; 4], lags: usize) -> Result<Self> {
        let regions = series[0].len();
        if series.iter().any(|s| s.len() != regions) {
            return Err(Error::Contract("channels disagree on region count".into()));
        }
        let width = lags + 1;
        let mut data = vec![0.0; regions * 4 * width];
        for (c, chan) in series.iter().enumerate() {
            for (r, s) in chan.iter().enumerate() {
                let v = acf_vector(s, lags)?;
                let o = (r * 4 + c) * width;
                data[o..o + width].copy_from_slice(&v.0);
            }
        }
        Ok(WindowAcf { lags, regions, data })
    }

    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    #[inline]
    pub fn get(&self, region: usize, channel: usize) -> &[f64] {
        let w = self.lags + 1;
        let o = (region * 4 + channel) * w;
        &self.data[o..o + w]
    }
}

/// `S^dv, S^sv, S^ju, S^jd` against one target region.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMaps {
    pub target: usize,
    pub maps: [Vec<f64>; 4],
}

pub fn similarity_maps(acf: &WindowAcf, target: usize) -> Result<SimilarityMaps> {
    if target >= acf.regions() {
        return Err(Error::Bounds(format!("target {target} >= {} regions", acf.regions())));
    }
    let maps = std::array::from_fn(|c| {
        let k = acf.get(target, c);
        (0..acf.regions()).map(|i| dot(acf.get(i, c), k)).collect()
    });
    Ok(SimilarityMaps { target, maps })
}

/// The 1×1 convolution over the four similarity maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub w: [f64; 4],
    pub b: f64,
}

impl Default for ChannelWeights {
    /// Uniform averaging, so `sd_k = mean ‖acf_k‖² >= 1` before training.
    fn default() -> Self {
        ChannelWeights { w: [0.25; 4], b: 0.0 }
    }
}

pub fn similarity_distance(maps: &SimilarityMaps, weights: &ChannelWeights) -> Vec<f64> {
    let n = maps.maps[0].len();
    (0..n)
        .map(|i| weights.b + (0..4).map(|c| weights.w[c] * maps.maps[c][i]).sum::<f64>())
        .collect()
}

/// Gradient of a scalar with respect to the channel weights given `dL/dsd`.
pub fn similarity_distance_grad(maps: &SimilarityMaps, d_sd: &[f64]) -> ChannelWeights {
    let w = std::array::from_fn(|c| dot(&maps.maps[c], d_sd));
    ChannelWeights { w, b: d_sd.iter().sum() }
}

/// `ha_i = 1` iff `sd_i > beta * sd_k`.
pub fn hard_attention(sd: &[f64], target: usize, beta: f64) -> Vec<bool> {
    let threshold = beta * sd[target];
    sd.iter().map(|&v| v > threshold).collect()
}

/// `sa_i = sd_i / sd_k`.
pub fn sample_attention(sd: &[f64], target: usize) -> Result<Vec<f64>> {
    let sk = sd[target];
    if sk.abs() <= SD_EPSILON {
        return Err(Error::DegenerateTarget(sk));
    }
    Ok(sd.iter().map(|v| v / sk).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutcome {
    pub target: usize,
    pub beta: f64,
    pub sd: Vec<f64>,
    pub ha: Vec<bool>,
    pub sa: Vec<f64>,
    pub fa: Vec<f64>,
}

impl AttentionOutcome {
    pub fn compute(maps: &SimilarityMaps, weights: &ChannelWeights, beta: f64) -> Result<Self> {
        let sd = similarity_distance(maps, weights);
        let ha = hard_attention(&sd, maps.target, beta);
        let sa = sample_attention(&sd, maps.target)?;
        let fa = ha.iter().zip(&sa).map(|(&h, &s)| if h { s } else { 0.0 }).collect();
        Ok(AttentionOutcome { target: maps.target, beta, sd, ha, sa, fa })
    }

    /// Gradient of a scalar with respect to the channel weights, given
    /// `dL/dfa`. The hard mask is treated as a constant.
    pub fn backward(&self, maps: &SimilarityMaps, d_fa: &[f64]) -> ChannelWeights {
        let k = self.target;
        let sk = self.sd[k];
        let mut d_sd = vec![0.0; self.sd.len()];
        let mut d_sk = 0.0;
        for i in 0..self.sd.len() {
            if !self.ha[i] {
                continue;
            }
            // sa_i = sd_i / sd_k
            d_sd[i] += d_fa[i] / sk;
            d_sk -= d_fa[i] * self.sd[i] / (sk * sk);
        }
        d_sd[k] += d_sk;
        similarity_distance_grad(maps, &d_sd)
    }

    /// Writes `sd`, `ha`, `sa` and `fa` as `rows`×`cols` CSV grids.
    pub fn dump_csv(&self, dir: &Path, prefix: &str, grid: &GridSpec) -> Result<()> {
        fs::create_dir_all(dir)?;
        let ha: Vec<f64> = self.ha.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        for (name, values) in [("sd", &self.sd), ("ha", &ha), ("sa", &self.sa), ("fa", &self.fa)] {
            let mut text = String::new();
            for r in 0..grid.rows {
                let row: Vec<String> =
                    (0..grid.cols).map(|c| values[r * grid.cols + c].to_string()).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            fs::write(dir.join(format!("{prefix}_{name}.csv")), text)?;
        }
        Ok(())
    }
}

/// `s_j = Σ_i fa_i · ds_j^i`; `gaps` is region-major with `window` values per
/// region. With `normalize` the sum is divided by `Σ_i fa_i`.
pub fn synthesize(gaps: &[f64], fa: &[f64], window: usize, normalize: bool) -> Result<Vec<f64>> {
    if gaps.len() != fa.len() * window {
        return Err(Error::Contract(format!(
            "gap window holds {} values, expected {} regions x {window}",
            gaps.len(),
            fa.len()
        )));
    }
    let mut s = vec![0.0; window];
    for (i, &f) in fa.iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        for (j, v) in s.iter_mut().enumerate() {
            *v += f * gaps[i * window + j];
        }
    }
    if normalize {
        let z: f64 = fa.iter().sum();
        if z.abs() <= SD_EPSILON {
            return Err(Error::DegenerateTarget(z));
        }
        s.iter_mut().for_each(|v| *v /= z);
    }
    Ok(s)
}

/// `dL/dfa` given `dL/ds`.
pub fn synthesize_backward(gaps: &[f64], fa: &[f64], window: usize, normalize: bool, d_s: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = (0..fa.len())
        .map(|i| dot(&gaps[i * window..(i + 1) * window], d_s))
        .collect();
    if !normalize {
        return raw;
    }
    let z: f64 = fa.iter().sum();
    // s = u / z, u_j = Σ fa_i g_ij
    let u: Vec<f64> = (0..window)
        .map(|j| fa.iter().enumerate().map(|(i, f)| f * gaps[i * window + j]).sum())
        .collect();
    let correction = dot(&u, d_s) / (z * z);
    raw.into_iter().map(|r| r / z - correction).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn acf_examples() {
        assert_eq!(acf_vector(&[3.0; 4], 2).unwrap().0, vec![1.0, 0.0, 0.0]);
        let v = acf_vector(&[1.0, 2.0, 3.0, 4.0], 1).unwrap().0;
        assert_abs_diff_eq!(v[0], 1.0);
        assert_abs_diff_eq!(v[1], 0.25, epsilon = 1e-15);
        let v = acf_vector(&[1.0, -1.0, 1.0, -1.0], 1).unwrap().0;
        assert_abs_diff_eq!(v[1], -0.75, epsilon = 1e-15);
    }

    #[test]
    fn acf_preconditions() {
        assert!(acf_vector(&[1.0, 2.0], 0).is_err());
        assert!(acf_vector(&[1.0, 2.0, 3.0, 4.0], 3).is_err());
        assert!(acf_vector(&[1.0, 2.0, 3.0, 4.0], 2).is_ok());
    }

    #[test]
    fn similarity_examples() {
        let a = AcfVector(vec![1.0, 0.25]);
        let b = AcfVector(vec![1.0, -0.75]);
        assert_abs_diff_eq!(a.dot(&a), 1.0625);
        assert_abs_diff_eq!(a.dot(&b), 0.8125);
    }

    fn fixture_maps() -> SimilarityMaps {
        SimilarityMaps {
            target: 0,
            maps: [vec![2.0, 1.0, 0.5], vec![1.5, 0.2, 0.1], vec![1.2, 1.1, -0.3], vec![1.0, 0.0, 0.4]],
        }
    }

    #[test]
    fn distance_weight_cases() {
        let m = fixture_maps();
        let sd = similarity_distance(&m, &ChannelWeights::default());
        for i in 0..3 {
            let mean = (m.maps[0][i] + m.maps[1][i] + m.maps[2][i] + m.maps[3][i]) / 4.0;
            assert_abs_diff_eq!(sd[i], mean, epsilon = 1e-15);
        }
        let sel = ChannelWeights { w: [1.0, 0.0, 0.0, 0.0], b: 0.0 };
        assert_eq!(similarity_distance(&m, &sel), m.maps[0]);
    }

    #[test]
    fn distance_gradient_matches_finite_difference() {
        let m = fixture_maps();
        let base = ChannelWeights { w: [0.3, -0.2, 0.7, 0.1], b: 0.05 };
        let g = similarity_distance_grad(&m, &[0.0, 1.0, 0.0]);
        let eps = 1e-6;
        let mut plus = base;
        plus.w[1] += eps;
        let mut minus = base;
        minus.w[1] -= eps;
        let fd = (similarity_distance(&m, &plus)[1] - similarity_distance(&m, &minus)[1]) / (2.0 * eps);
        assert_abs_diff_eq!(g.w[1], m.maps[1][1], epsilon = 1e-15);
        assert_abs_diff_eq!(fd, m.maps[1][1], epsilon = 1e-6);
    }

    #[test]
    fn hard_attention_examples() {
        let sd = [2.0, 1.9, 1.7];
        assert_eq!(hard_attention(&sd, 0, 0.9), vec![true, true, false]);
        assert_eq!(hard_attention(&sd, 0, 1.0), vec![false, false, false]);
        assert_eq!(hard_attention(&[2.0, 2.5], 0, 1.0), vec![false, true]);
    }

    #[test]
    fn sample_attention_examples() {
        let sa = sample_attention(&[2.0, 1.9], 0).unwrap();
        assert_eq!(sa[0], 1.0);
        assert_abs_diff_eq!(sa[1], 0.95, epsilon = 1e-15);
        assert!(matches!(sample_attention(&[0.0, 1.0], 0), Err(Error::DegenerateTarget(_))));
    }

    #[test]
    fn synthesize_examples() {
        let gaps = [1.0, 2.0, 3.0, 2.0, 2.0, 2.0];
        assert_eq!(synthesize(&gaps, &[1.0, 0.0], 3, false).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(synthesize(&gaps, &[0.0, 0.0], 3, false).unwrap(), vec![0.0; 3]);
        assert_eq!(synthesize(&gaps, &[1.0, 0.5], 3, false).unwrap(), vec![2.0, 3.0, 4.0]);
        assert_eq!(synthesize(&gaps, &[1.0, 1.0], 3, true).unwrap(), vec![1.5, 2.0, 2.5]);
        assert!(synthesize(&gaps, &[1.0], 3, false).is_err());
    }

    #[test]
    fn attention_invariants() {
        let m = fixture_maps();
        let out = AttentionOutcome::compute(&m, &ChannelWeights::default(), DEFAULT_BETA).unwrap();
        assert_eq!(out.sa[0], 1.0);
        assert!(out.ha[0]);
        for i in 0..3 {
            let expect = if out.ha[i] { out.sa[i] } else { 0.0 };
            assert_eq!(out.fa[i], expect);
        }
    }

    #[test]
    fn attention_backward_matches_finite_difference() {
        let m = fixture_maps();
        let gaps = [0.1, 0.4, 0.3, 0.9, 0.2, 0.5, 0.7, 0.6, 0.8];
        let d_s = [0.3, -1.1, 0.7];
        for normalize in [false, true] {
            let loss = |w: &ChannelWeights| {
                let out = AttentionOutcome::compute(&m, w, 0.5).unwrap();
                let s = synthesize(&gaps, &out.fa, 3, normalize).unwrap();
                dot(&s, &d_s)
            };
            let w0 = ChannelWeights { w: [0.4, 0.1, 0.3, 0.2], b: 0.1 };
            let out = AttentionOutcome::compute(&m, &w0, 0.5).unwrap();
            let d_fa = synthesize_backward(&gaps, &out.fa, 3, normalize, &d_s);
            let g = out.backward(&m, &d_fa);
            let eps = 1e-6;
            for c in 0..5 {
                let mut p = w0;
                let mut q = w0;
                if c < 4 {
                    p.w[c] += eps;
                    q.w[c] -= eps;
                } else {
                    p.b += eps;
                    q.b -= eps;
                }
                let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
                let an = if c < 4 { g.w[c] } else { g.b };
                assert_abs_diff_eq!(fd, an, epsilon = 1e-7);
            }
        }
    }
}
