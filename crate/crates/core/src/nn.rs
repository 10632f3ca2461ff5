//! Named parameter storage and the dense building blocks (affine map, 3×3
//! same-padded convolution, LSTM) with explicit backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBlock {
    /// Parameter group: the name up to the first `.`.
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered collection of named parameter arrays. Gradients and Adam
/// moments use stores with the same layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push(ParamBlock { name: name.into(), shape, data });
        ParamId(self.blocks.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.blocks[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.blocks[id.0].data
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            blocks: self
                .blocks
                .iter()
                .map(|b| ParamBlock { name: b.name.clone(), shape: b.shape.clone(), data: vec![0.0; b.data.len()] })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamStore) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

#[inline]
pub(crate) fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W x + b`, `W` stored row-major `output × input`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add(format!("{name}.w"), vec![output, input], uniform_fan_in(rng, input, input * output));
        let b = store.add(format!("{name}.b"), vec![output], vec![0.0; output]);
        Linear { w, b, input, output }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input);
        let w = p.get(self.w);
        let b = p.get(self.b);
        for (o, out) in y.iter_mut().enumerate().take(self.output) {
            let row = &w[o * self.input..(o + 1) * self.input];
            *out = b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
    }

    pub fn forward_vec(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.output];
        self.forward(p, x, &mut y);
        y
    }

    /// Accumulates parameter gradients into `g` and, when given, `W^T dy` into `dx`.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        {
            let gw = g.get_mut(self.w);
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * self.input..(o + 1) * self.input];
                for (a, v) in row.iter_mut().zip(x) {
                    *a += d * v;
                }
            }
        }
        for (a, d) in g.get_mut(self.b).iter_mut().zip(dy) {
            *a += d;
        }
        if let Some(dx) = dx {
            let w = p.get(self.w);
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * self.input..(o + 1) * self.input];
                for (a, v) in dx.iter_mut().zip(row) {
                    *a += d * v;
                }
            }
        }
    }
}

/// 3×3 convolution with stride 1 and zero "same" padding on a `size`×`size`
/// map. Layout is channel-major `[channel][row][col]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub size: usize,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * 9;
        let w = store.add(format!("{name}.w"), vec![out_ch, in_ch, 3, 3], uniform_fan_in(rng, fan_in, out_ch * fan_in));
        let b = store.add(format!("{name}.b"), vec![out_ch], vec![0.0; out_ch]);
        Conv3x3 { w, b, in_ch, out_ch, size }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], y: &mut [f64]) {
        let s = self.size;
        let area = s * s;
        let w = p.get(self.w);
        let b = p.get(self.b);
        for o in 0..self.out_ch {
            let out = &mut y[o * area..(o + 1) * area];
            out.iter_mut().for_each(|v| *v = b[o]);
            for i in 0..self.in_ch {
                let xin = &x[i * area..(i + 1) * area];
                let k = &w[(o * self.in_ch + i) * 9..(o * self.in_ch + i + 1) * 9];
                for r in 0..s {
                    for c in 0..s {
                        let mut acc = 0.0;
                        for kr in 0..3 {
                            let rr = r + kr;
                            if rr < 1 || rr > s {
                                continue;
                            }
                            let rr = rr - 1;
                            for kc in 0..3 {
                                let cc = c + kc;
                                if cc < 1 || cc > s {
                                    continue;
                                }
                                acc += k[kr * 3 + kc] * xin[rr * s + cc - 1];
                            }
                        }
                        out[r * s + c] += acc;
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients and `dL/dx` (into `dx`).
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        let s = self.size;
        let area = s * s;
        let w = p.get(self.w);
        {
            let gb = g.get_mut(self.b);
            for o in 0..self.out_ch {
                gb[o] += dy[o * area..(o + 1) * area].iter().sum::<f64>();
            }
        }
        let gw = g.get_mut(self.w);
        for o in 0..self.out_ch {
            let d = &dy[o * area..(o + 1) * area];
            for i in 0..self.in_ch {
                let base = (o * self.in_ch + i) * 9;
                let xin = &x[i * area..(i + 1) * area];
                let dxi = &mut dx[i * area..(i + 1) * area];
                for r in 0..s {
                    for c in 0..s {
                        let dv = d[r * s + c];
                        if dv == 0.0 {
                            continue;
                        }
                        for kr in 0..3 {
                            let rr = r + kr;
                            if rr < 1 || rr > s {
                                continue;
                            }
                            let rr = rr - 1;
                            for kc in 0..3 {
                                let cc = c + kc;
                                if cc < 1 || cc > s {
                                    continue;
                                }
                                let xi = rr * s + cc - 1;
                                gw[base + kr * 3 + kc] += dv * xin[xi];
                                dxi[xi] += dv * w[base + kr * 3 + kc];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Standard LSTM with gate order (input, forget, candidate, output).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `4 × hidden`.
    gates: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
}

impl LstmCache {
    pub fn last_hidden(&self) -> &[f64] {
        &self.steps.last().expect("non-empty sequence").h
    }
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = input + hidden;
        let wx = store.add(format!("{name}.wx"), vec![4 * hidden, input], uniform_fan_in(rng, fan_in, 4 * hidden * input));
        let wh = store.add(format!("{name}.wh"), vec![4 * hidden, hidden], uniform_fan_in(rng, fan_in, 4 * hidden * hidden));
        let b = store.add(format!("{name}.b"), vec![4 * hidden], vec![0.0; 4 * hidden]);
        Lstm { wx, wh, b, input, hidden }
    }

    /// One cell application from `(h_prev, c_prev)`.
    pub fn step(&self, p: &ParamStore, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
        let hd = self.hidden;
        let wx = p.get(self.wx);
        let wh = p.get(self.wh);
        let b = p.get(self.b);
        let mut gates = vec![0.0; 4 * hd];
        for (r, gate) in gates.iter_mut().enumerate() {
            let mut a = b[r];
            a += wx[r * self.input..(r + 1) * self.input].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            a += wh[r * hd..(r + 1) * hd].iter().zip(h_prev).map(|(w, v)| w * v).sum::<f64>();
            *gate = if (2 * hd..3 * hd).contains(&r) { a.tanh() } else { sigmoid(a) };
        }
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for u in 0..hd {
            let (i, f, gg, o) = (gates[u], gates[hd + u], gates[2 * hd + u], gates[3 * hd + u]);
            c[u] = f * c_prev[u] + i * gg;
            h[u] = o * c[u].tanh();
        }
        LstmStep { x: x.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), gates, c, h }
    }

    /// Runs the sequence from zero state.
    pub fn forward(&self, p: &ParamStore, xs: &[Vec<f64>]) -> LstmCache {
        let mut h = vec![0.0; self.hidden];
        let mut c = vec![0.0; self.hidden];
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let st = self.step(p, x, &h, &c);
            h.clone_from(&st.h);
            c.clone_from(&st.c);
            steps.push(st);
        }
        LstmCache { steps }
    }

    /// Backpropagates `dL/dh_T`; returns `dL/dx_t` for every step.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &LstmCache, dh_last: &[f64]) -> Vec<Vec<f64>> {
        let hd = self.hidden;
        let wx = p.get(self.wx);
        let wh = p.get(self.wh);
        let mut dh = dh_last.to_vec();
        let mut dc = vec![0.0; hd];
        let mut dxs = vec![Vec::new(); cache.steps.len()];
        let mut da = vec![0.0; 4 * hd];
        for (t, st) in cache.steps.iter().enumerate().rev() {
            for u in 0..hd {
                let (i, f, gg, o) = (st.gates[u], st.gates[hd + u], st.gates[2 * hd + u], st.gates[3 * hd + u]);
                let tc = st.c[u].tanh();
                let do_ = dh[u] * tc;
                let dcu = dc[u] + dh[u] * o * (1.0 - tc * tc);
                da[u] = dcu * gg * i * (1.0 - i);
                da[hd + u] = dcu * st.c_prev[u] * f * (1.0 - f);
                da[2 * hd + u] = dcu * i * (1.0 - gg * gg);
                da[3 * hd + u] = do_ * o * (1.0 - o);
                dc[u] = dcu * f;
            }
            {
                let gwx = g.get_mut(self.wx);
                for (r, &d) in da.iter().enumerate() {
                    for (a, v) in gwx[r * self.input..(r + 1) * self.input].iter_mut().zip(&st.x) {
                        *a += d * v;
                    }
                }
            }
            {
                let gwh = g.get_mut(self.wh);
                for (r, &d) in da.iter().enumerate() {
                    for (a, v) in gwh[r * hd..(r + 1) * hd].iter_mut().zip(&st.h_prev) {
                        *a += d * v;
                    }
                }
            }
            for (a, d) in g.get_mut(self.b).iter_mut().zip(&da) {
                *a += d;
            }
            let mut dx = vec![0.0; self.input];
            let mut dh_prev = vec![0.0; hd];
            for (r, &d) in da.iter().enumerate() {
                for (a, w) in dx.iter_mut().zip(&wx[r * self.input..(r + 1) * self.input]) {
                    *a += d * w;
                }
                for (a, w) in dh_prev.iter_mut().zip(&wh[r * hd..(r + 1) * hd]) {
                    *a += d * w;
                }
            }
            dxs[t] = dx;
            dh = dh_prev;
        }
        dxs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Central-difference check of every parameter of `store` for `loss`.
    fn check_params(store: &ParamStore, analytic: &ParamStore, loss: impl Fn(&ParamStore) -> f64) -> f64 {
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (bi, block) in store.blocks().iter().enumerate() {
            for k in 0..block.data.len() {
                let mut p = store.clone();
                p.blocks_mut()[bi].data[k] += eps;
                let lp = loss(&p);
                p.blocks_mut()[bi].data[k] -= 2.0 * eps;
                let lm = loss(&p);
                let fd = (lp - lm) / (2.0 * eps);
                let an = analytic.blocks()[bi].data[k];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn linear_gradients() {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng());
        let x = [0.3, -0.7, 1.1];
        let loss = |p: &ParamStore| lin.forward_vec(p, &x).iter().map(|v| v * v).sum::<f64>();
        let y = lin.forward_vec(&store, &x);
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut g = store.zeros_like();
        let mut dx = vec![0.0; 3];
        lin.backward(&store, &mut g, &x, &dy, Some(&mut dx));
        assert!(check_params(&store, &g, loss) < 1e-8);
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 3, 4, &mut rng());
        let x: Vec<f64> = (0..32).map(|v| (v as f64 * 0.37).sin()).collect();
        let mut y = vec![0.0; 48];
        conv.forward(&store, &x, &mut y);
        let w = store.get(conv.w);
        let b = store.get(conv.b);
        for o in 0..3 {
            for r in 0..4i32 {
                for c in 0..4i32 {
                    let mut acc = b[o];
                    for i in 0..2 {
                        for dr in -1..=1i32 {
                            for dc in -1..=1i32 {
                                let (rr, cc) = (r + dr, c + dc);
                                if (0..4).contains(&rr) && (0..4).contains(&cc) {
                                    let k = w[(o * 2 + i) * 9 + ((dr + 1) * 3 + dc + 1) as usize];
                                    acc += k * x[i * 16 + (rr * 4 + cc) as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - y[o * 16 + (r * 4 + c) as usize]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 2, 3, &mut rng());
        let x: Vec<f64> = (0..18).map(|v| (v as f64 * 0.71).cos()).collect();
        let fwd = |p: &ParamStore| {
            let mut y = vec![0.0; 18];
            conv.forward(p, &x, &mut y);
            y
        };
        let y = fwd(&store);
        let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut g = store.zeros_like();
        let mut dx = vec![0.0; 18];
        conv.backward(&store, &mut g, &x, &dy, &mut dx);
        assert!(check_params(&store, &g, |p| fwd(p).iter().map(|v| v * v).sum()) < 1e-7);
        // input gradient
        let eps = 1e-6;
        for k in 0..18 {
            let mut xp = x.clone();
            xp[k] += eps;
            let mut yp = vec![0.0; 18];
            conv.forward(&store, &xp, &mut yp);
            xp[k] -= 2.0 * eps;
            let mut ym = vec![0.0; 18];
            conv.forward(&store, &xp, &mut ym);
            let fd = (yp.iter().map(|v| v * v).sum::<f64>() - ym.iter().map(|v| v * v).sum::<f64>()) / (2.0 * eps);
            assert!((fd - dx[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero_state() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng());
        let zero = store.zeros_like();
        let cache = lstm.forward(&zero, &vec![vec![0.0; 3]; 5]);
        assert!(cache.last_hidden().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_matches_hand_cell() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 2, 3, &mut rng());
        for v in store.get_mut(lstm.b) {
            *v = 0.1;
        }
        let x = vec![0.5, -0.4];
        let h = lstm.forward(&store, &[x.clone()]).last_hidden().to_vec();
        let (wx, b) = (store.get(lstm.wx), store.get(lstm.b));
        let pre = |r: usize| b[r] + wx[r * 2] * x[0] + wx[r * 2 + 1] * x[1];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for u in 0..3 {
            let i = sig(pre(u));
            let g = pre(6 + u).tanh();
            let o = sig(pre(9 + u));
            let c = i * g;
            assert!((h[u] - o * c.tanh()).abs() < 1e-10);
        }
    }

    #[test]
    fn lstm_gradients() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 3, 4, &mut rng());
        let xs: Vec<Vec<f64>> = (0..4).map(|t| (0..3).map(|i| ((t * 3 + i) as f64 * 0.9).sin()).collect()).collect();
        let loss = |p: &ParamStore| lstm.forward(p, &xs).last_hidden().iter().map(|v| v * v).sum::<f64>();
        let cache = lstm.forward(&store, &xs);
        let dh: Vec<f64> = cache.last_hidden().iter().map(|v| 2.0 * v).collect();
        let mut g = store.zeros_like();
        let dxs = lstm.backward(&store, &mut g, &cache, &dh);
        let worst = check_params(&store, &g, loss);
        assert!(worst < 1e-5, "worst {worst}");
        let eps = 1e-6;
        for t in 0..4 {
            for i in 0..3 {
                let mut xp = xs.clone();
                xp[t][i] += eps;
                let lp = lstm.forward(&store, &xp).last_hidden().iter().map(|v| v * v).sum::<f64>();
                xp[t][i] -= 2.0 * eps;
                let lm = lstm.forward(&store, &xp).last_hidden().iter().map(|v| v * v).sum::<f64>();
                assert!(((lp - lm) / (2.0 * eps) - dxs[t][i]).abs() < 1e-7);
            }
        }
    }
}
