//! Sequence encoding and prediction: per-interval feature assembly, LSTM
//! encoding, content-based attention over days and the 3-layer ReLU head.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{relu, Linear, Lstm, LstmCache, ParamStore};
use crate::semantic::dot;

/// Guard on the day-attention denominator.
pub const ALPHA_EPSILON: f64 = 1e-8;

static ALPHA_FALLBACKS: AtomicUsize = AtomicUsize::new(0);

/// How many times day attention fell back to uniform weights in this process.
pub fn alpha_fallback_count() -> usize {
    ALPHA_FALLBACKS.load(Ordering::Relaxed)
}

/// `F_j = [g_j, s_j]`.
pub fn build_feature_sequence(spatial: &[Vec<f64>], semantic: &[f64]) -> Result<Vec<Vec<f64>>> {
    if spatial.len() != semantic.len() {
        return Err(Error::Contract(format!(
            "{} spatial steps vs {} semantic steps",
            spatial.len(),
            semantic.len()
        )));
    }
    Ok(spatial
        .iter()
        .zip(semantic)
        .map(|(g, &s)| {
            let mut f = Vec::with_capacity(g.len() + 1);
            f.extend_from_slice(g);
            f.push(s);
            f
        })
        .collect())
}

/// Final hidden state of the LSTM run from zero state.
pub fn lstm_encode(p: &ParamStore, lstm: &Lstm, features: &[Vec<f64>]) -> Result<(Vec<f64>, LstmCache)> {
    if features.is_empty() {
        return Err(Error::Contract("empty feature sequence".into()));
    }
    if let Some(f) = features.iter().find(|f| f.len() != lstm.input) {
        return Err(Error::Contract(format!("feature of length {} for LSTM input {}", f.len(), lstm.input)));
    }
    let cache = lstm.forward(p, features);
    Ok((cache.last_hidden().to_vec(), cache))
}

/// Attention weights over the day representations and the resulting
/// long-term vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DayAttention {
    pub alpha: Vec<f64>,
    /// `h_k · h_D` for every day.
    pub scores: Vec<f64>,
    pub denominator: f64,
    /// True when the denominator was below the guard and uniform weights were used.
    pub fallback: bool,
    pub long_term: Vec<f64>,
}

/// `α_k = (h_k·h_D) / Σ_m (h_m·h_D)`, with `h_D` the last entry.
pub fn day_attention(states: &[Vec<f64>]) -> Result<(Vec<f64>, bool)> {
    let (alpha, _, _, fallback) = attention_parts(states)?;
    Ok((alpha, fallback))
}

fn attention_parts(states: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>, f64, bool)> {
    let last = states.last().ok_or_else(|| Error::Contract("no day states".into()))?;
    let scores: Vec<f64> = states.iter().map(|h| dot(h, last)).collect();
    let z: f64 = scores.iter().sum();
    if z.abs() <= ALPHA_EPSILON {
        ALPHA_FALLBACKS.fetch_add(1, Ordering::Relaxed);
        log::warn!("day attention denominator {z:e} below guard; using uniform weights");
        let d = states.len() as f64;
        return Ok((vec![1.0 / d; states.len()], scores, z, true));
    }
    Ok((scores.iter().map(|s| s / z).collect(), scores, z, false))
}

/// `h^L = Σ_k α_k h_k`.
pub fn long_term(alpha: &[f64], states: &[Vec<f64>]) -> Result<Vec<f64>> {
    if alpha.len() != states.len() || states.is_empty() {
        return Err(Error::Contract(format!("{} weights for {} states", alpha.len(), states.len())));
    }
    let mut out = vec![0.0; states[0].len()];
    for (a, h) in alpha.iter().zip(states) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += a * v;
        }
    }
    Ok(out)
}

impl DayAttention {
    pub fn compute(states: &[Vec<f64>]) -> Result<Self> {
        let (alpha, scores, denominator, fallback) = attention_parts(states)?;
        let long_term = long_term(&alpha, states)?;
        Ok(DayAttention { alpha, scores, denominator, fallback, long_term })
    }

    /// Gradients with respect to every day state given `dL/dh^L`.
    pub fn backward(&self, states: &[Vec<f64>], d_long: &[f64]) -> Vec<Vec<f64>> {
        let dn = states.len();
        let mut d_states: Vec<Vec<f64>> = self
            .alpha
            .iter()
            .map(|a| d_long.iter().map(|g| a * g).collect())
            .collect();
        if self.fallback {
            return d_states;
        }
        let d_alpha: Vec<f64> = states.iter().map(|h| dot(h, d_long)).collect();
        let mean = dot(&d_alpha, &self.alpha);
        let last = &states[dn - 1];
        for k in 0..dn {
            let d_score = (d_alpha[k] - mean) / self.denominator;
            // score_k = h_k · h_D
            for u in 0..last.len() {
                d_states[k][u] += d_score * last[u];
                d_states[dn - 1][u] += d_score * states[k][u];
            }
        }
        d_states
    }
}

/// Three fully connected layers, ReLU after each; the last one is `W_f, b_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictHead {
    pub layers: [Linear; 3],
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    inputs: [Vec<f64>; 3],
    pre: [Vec<f64>; 3],
}

impl HeadCache {
    pub fn pre_activation(&self) -> f64 {
        self.pre[2][0]
    }
}

impl PredictHead {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        PredictHead {
            layers: [
                Linear::new(store, "head.l0", input, hidden, rng),
                Linear::new(store, "head.l1", hidden, hidden, rng),
                Linear::new(store, "head.out", hidden, 1, rng),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Result<(f64, HeadCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!("head input {} expected {}", x.len(), self.input_dim())));
        }
        let mut inputs: [Vec<f64>; 3] = Default::default();
        let mut pre: [Vec<f64>; 3] = Default::default();
        let mut cur = x.to_vec();
        for (l, lin) in self.layers.iter().enumerate() {
            let a = lin.forward_vec(p, &cur);
            inputs[l] = std::mem::replace(&mut cur, a.iter().map(|&v| relu(v)).collect());
            pre[l] = a;
        }
        Ok((cur[0], HeadCache { inputs, pre }))
    }

    /// Returns `dL/dx` for `dL/dŷ`.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &HeadCache, dy: f64) -> Vec<f64> {
        let mut d = vec![dy];
        for l in (0..3).rev() {
            let da: Vec<f64> = d.iter().zip(&cache.pre[l]).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
            let mut dx = vec![0.0; self.layers[l].input];
            self.layers[l].backward(p, g, &cache.inputs[l], &da, Some(&mut dx));
            d = dx;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    #[test]
    fn feature_sequence_layout() {
        let g = vec![vec![1.0; 128]; 5];
        let f = build_feature_sequence(&g, &[0.0; 5]).unwrap();
        assert_eq!(f[0].len(), 129);
        assert!(f.iter().all(|step| step[128] == 0.0));
        assert!(build_feature_sequence(&g, &[0.0; 4]).is_err());

        let g: Vec<Vec<f64>> = (0..3).map(|j| vec![j as f64; 2]).collect();
        let s = [10.0, 11.0, 12.0];
        let f = build_feature_sequence(&g, &s).unwrap();
        let gp = vec![g[2].clone(), g[0].clone(), g[1].clone()];
        let fp = build_feature_sequence(&gp, &[12.0, 10.0, 11.0]).unwrap();
        assert_eq!(fp, vec![f[2].clone(), f[0].clone(), f[1].clone()]);
    }

    #[test]
    fn attention_examples() {
        let same = vec![vec![0.3, -0.2]; 4];
        let (a, fb) = day_attention(&same).unwrap();
        assert!(!fb);
        for v in &a {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
        // h_1·h_2 = 1, h_2·h_2 = 3
        let states = vec![vec![1.0, 0.0], vec![1.0, 2f64.sqrt()]];
        let (a, _) = day_attention(&states).unwrap();
        assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn attention_fallback_is_uniform() {
        let before = alpha_fallback_count();
        let states = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0]];
        let (a, fb) = day_attention(&states).unwrap();
        assert!(fb);
        assert_eq!(a, vec![1.0 / 3.0; 3]);
        assert!(alpha_fallback_count() > before);
    }

    #[test]
    fn long_term_cases() {
        let states = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(long_term(&[0.0, 0.0, 1.0], &states).unwrap(), states[2]);
        let same = vec![vec![0.7, -0.1]; 3];
        let hl = long_term(&[1.0 / 3.0; 3], &same).unwrap();
        assert_abs_diff_eq!(hl[0], 0.7, epsilon = 1e-15);
        assert!(long_term(&[1.0], &states).is_err());
    }

    #[test]
    fn attention_backward_matches_finite_difference() {
        let states = vec![vec![0.3, 0.5, -0.2], vec![0.1, 0.4, 0.6], vec![0.5, 0.2, 0.3]];
        let w = [0.7, -1.3, 0.4];
        let loss = |s: &[Vec<f64>]| dot(&DayAttention::compute(s).unwrap().long_term, &w);
        let att = DayAttention::compute(&states).unwrap();
        let grads = att.backward(&states, &w);
        let eps = 1e-6;
        for k in 0..3 {
            for u in 0..3 {
                let mut p = states.clone();
                p[k][u] += eps;
                let lp = loss(&p);
                p[k][u] -= 2.0 * eps;
                let lm = loss(&p);
                assert_abs_diff_eq!((lp - lm) / (2.0 * eps), grads[k][u], epsilon = 1e-8);
            }
        }
    }

    fn head_with(last_bias: f64) -> (ParamStore, PredictHead) {
        let mut store = ParamStore::new();
        let head = PredictHead::new(&mut store, 2, 2, &mut ChaCha8Rng::seed_from_u64(3));
        // identity-like hidden layers, output sums the hidden units
        for l in 0..2 {
            let w = store.get_mut(head.layers[l].w);
            w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            store.get_mut(head.layers[l].b).iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(head.layers[2].w).copy_from_slice(&[1.0, 1.0]);
        store.get_mut(head.layers[2].b)[0] = last_bias;
        (store, head)
    }

    #[test]
    fn head_relu_cases() {
        let (store, head) = head_with(-1.0);
        let (y, cache) = head.forward(&store, &[0.0, 0.0]).unwrap();
        assert_eq!(cache.pre_activation(), -1.0);
        assert_eq!(y, 0.0);
        let (store, head) = head_with(0.0);
        let (y, _) = head.forward(&store, &[0.37, 0.0]).unwrap();
        assert_abs_diff_eq!(y, 0.37, epsilon = 1e-15);
        assert!(head.forward(&store, &[0.1]).is_err());
    }

    #[test]
    fn head_gradients() {
        let mut store = ParamStore::new();
        let head = PredictHead::new(&mut store, 3, 4, &mut ChaCha8Rng::seed_from_u64(5));
        store.get_mut(head.layers[2].b)[0] = 1.0;
        for l in 0..2 {
            store.get_mut(head.layers[l].b).iter_mut().for_each(|v| *v = 0.2);
        }
        let x = [0.4, -0.3, 0.8];
        let loss = |p: &ParamStore| head.forward(p, &x).unwrap().0.powi(2);
        let (y, cache) = head.forward(&store, &x).unwrap();
        assert!(y > 0.0);
        let mut g = store.zeros_like();
        head.backward(&store, &mut g, &cache, 2.0 * y);
        let eps = 1e-6;
        for (bi, block) in store.blocks().iter().enumerate() {
            for k in 0..block.data.len() {
                let mut p = store.clone();
                p.blocks_mut()[bi].data[k] += eps;
                let lp = loss(&p);
                p.blocks_mut()[bi].data[k] -= 2.0 * eps;
                let lm = loss(&p);
                let fd = (lp - lm) / (2.0 * eps);
                let an = g.blocks()[bi].data[k];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{}", block.name);
            }
        }
    }
}
