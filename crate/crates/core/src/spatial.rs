//! Spatial component: one residual CNN per channel group over the `S×S`
//! neighborhood of the target, paired fusion of (speed, volume) and
//! (journey up, journey down) with dimension reduction, and concatenation.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{fill_patch, Channel, CityCube, WEATHER_CATEGORIES};
use crate::nn::{relu, Conv3x3, Linear, ParamStore};

pub const RESIDUAL_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEncoder {
    layers: Vec<(Conv3x3, Conv3x3)>,
    proj: Linear,
    in_ch: usize,
    size: usize,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Vec<f64>,
    a1: Vec<f64>,
    z1: Vec<f64>,
    a2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    layers: Vec<LayerCache>,
    out_map: Vec<f64>,
}

impl ResidualEncoder {
    /// `in_ch` input planes, hidden conv width `width`, output dimension `out_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        width: usize,
        size: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..RESIDUAL_LAYERS)
            .map(|l| {
                (
                    Conv3x3::new(store, &format!("{name}.l{l}.conv1"), in_ch, width, size, rng),
                    Conv3x3::new(store, &format!("{name}.l{l}.conv2"), width, in_ch, size, rng),
                )
            })
            .collect();
        let proj = Linear::new(store, &format!("{name}.proj"), in_ch * size * size, out_dim, rng);
        ResidualEncoder { layers, proj, in_ch, size }
    }

    pub fn input_len(&self) -> usize {
        self.in_ch * self.size * self.size
    }

    pub fn output_dim(&self) -> usize {
        self.proj.output
    }

    pub fn projection(&self) -> &Linear {
        &self.proj
    }

    pub fn conv_layers(&self) -> &[(Conv3x3, Conv3x3)] {
        &self.layers
    }

    pub fn forward(&self, p: &ParamStore, patch: &[f64]) -> (Vec<f64>, EncoderCache) {
        let area = self.size * self.size;
        let mut x = patch.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (c1, c2) in &self.layers {
            let mut a1 = vec![0.0; c1.out_ch * area];
            c1.forward(p, &x, &mut a1);
            let z1: Vec<f64> = a1.iter().map(|&v| relu(v)).collect();
            let mut a2 = vec![0.0; self.in_ch * area];
            c2.forward(p, &z1, &mut a2);
            let y: Vec<f64> = x.iter().zip(&a2).map(|(xv, a)| xv + relu(*a)).collect();
            caches.push(LayerCache { x, a1, z1, a2 });
            x = y;
        }
        let out = self.proj.forward_vec(p, &x);
        (out, EncoderCache { layers: caches, out_map: x })
    }

    /// Accumulates parameter gradients for `dL/d(output)`.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &EncoderCache, dout: &[f64]) {
        let area = self.size * self.size;
        let mut dy = vec![0.0; cache.out_map.len()];
        self.proj.backward(p, g, &cache.out_map, dout, Some(&mut dy));
        for ((c1, c2), lc) in self.layers.iter().zip(&cache.layers).rev() {
            let dz2: Vec<f64> = dy.iter().zip(&lc.a2).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
            if dz2.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut dz1 = vec![0.0; c1.out_ch * area];
            c2.backward(p, g, &lc.z1, &dz2, &mut dz1);
            for (d, a) in dz1.iter_mut().zip(&lc.a1) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            // skip path keeps dy; conv path adds on top
            c1.backward(p, g, &lc.x, &dz1, &mut dy);
        }
    }
}

/// Encodes one patch (or one-hot stack) into a `d_g` feature vector.
pub fn encode_channel(p: &ParamStore, encoder: &ResidualEncoder, patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() != encoder.input_len() {
        return Err(Error::Contract(format!(
            "patch has {} values, encoder expects {}",
            patch.len(),
            encoder.input_len()
        )));
    }
    Ok(encoder.forward(p, patch).0)
}

/// FC reductions for the (speed, volume) and (journey up, journey down) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub tsv: Linear,
    pub jud: Linear,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, d_g: usize, rng: &mut ChaCha8Rng) -> Self {
        Fusion {
            tsv: Linear::new(store, "fusion.tsv", 2 * d_g, d_g, rng),
            jud: Linear::new(store, "fusion.jud", 2 * d_g, d_g, rng),
        }
    }
}

fn reduce(p: &ParamStore, lin: &Linear, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() + b.len() != lin.input {
        return Err(Error::Contract(format!(
            "fusion input {}+{} does not match {}",
            a.len(),
            b.len(),
            lin.input
        )));
    }
    let cat = [a, b].concat();
    Ok(lin.forward_vec(p, &cat).into_iter().map(relu).collect())
}

/// `ReLU(W [Gts; Gtv] + b)` and `ReLU(W' [Gju; Gjd] + b')`.
pub fn fuse_pairs(
    p: &ParamStore,
    fusion: &Fusion,
    gts: &[f64],
    gtv: &[f64],
    gju: &[f64],
    gjd: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((reduce(p, &fusion.tsv, gts, gtv)?, reduce(p, &fusion.jud, gju, gjd)?))
}

/// Concatenation in the fixed order (weather, speed/volume, journeys, gap).
pub fn spatial_representation(gwea: &[f64], tsv: &[f64], jud: &[f64], gds: &[f64]) -> Vec<f64> {
    [gwea, tsv, jud, gds].concat()
}

/// Channel groups with their own encoder, in encoder order.
pub const SCALAR_GROUPS: [Channel; 5] =
    [Channel::Speed, Channel::Volume, Channel::JourneyUp, Channel::JourneyDown, Channel::Gap];

/// Neighborhood inputs of one target cell for one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `4 × S × S` one-hot weather planes.
    pub weather: Vec<f64>,
    /// Patches for [`SCALAR_GROUPS`], each `S × S`.
    pub scalar: [Vec<f64>; 5],
}

impl PatchSet {
    pub fn from_cube(cube: &CityCube, day: usize, interval: usize, center: usize, size: usize) -> Self {
        let area = size * size;
        let grid = cube.grid();
        let mut codes = vec![0.0; area];
        fill_patch(cube.slice(Channel::Weather, day, interval), grid, center, size, &mut codes);
        let mut inside = vec![0.0; area];
        let ones = vec![1.0; grid.regions()];
        fill_patch(&ones, grid, center, size, &mut inside);
        let mut weather = vec![0.0; WEATHER_CATEGORIES * area];
        for k in 0..area {
            if inside[k] > 0.0 {
                let code = (codes[k].max(0.0) as usize).min(WEATHER_CATEGORIES - 1);
                weather[code * area + k] = 1.0;
            }
        }
        let scalar = std::array::from_fn(|i| {
            let mut buf = vec![0.0; area];
            fill_patch(cube.slice(SCALAR_GROUPS[i], day, interval), grid, center, size, &mut buf);
            buf
        });
        PatchSet { weather, scalar }
    }
}

/// All six encoders plus the pair fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBlock {
    pub weather: ResidualEncoder,
    /// Encoders for [`SCALAR_GROUPS`].
    pub scalar: Vec<ResidualEncoder>,
    pub fusion: Fusion,
    pub d_g: usize,
}

#[derive(Debug, Clone)]
pub struct SpatialCache {
    weather: EncoderCache,
    scalar: Vec<EncoderCache>,
    outs: Vec<Vec<f64>>,
    tsv_in: Vec<f64>,
    jud_in: Vec<f64>,
    tsv_out: Vec<f64>,
    jud_out: Vec<f64>,
}

impl SpatialBlock {
    pub fn new(store: &mut ParamStore, size: usize, width: usize, d_g: usize, rng: &mut ChaCha8Rng) -> Self {
        let weather = ResidualEncoder::new(store, "residual.weather", WEATHER_CATEGORIES, width, size, d_g, rng);
        let scalar = SCALAR_GROUPS
            .iter()
            .map(|ch| ResidualEncoder::new(store, &format!("residual.{}", ch.name()), 1, width, size, d_g, rng))
            .collect();
        let fusion = Fusion::new(store, d_g, rng);
        SpatialBlock { weather, scalar, fusion, d_g }
    }

    pub fn output_dim(&self) -> usize {
        4 * self.d_g
    }

    /// `g_j` for one interval.
    pub fn forward(&self, p: &ParamStore, patches: &PatchSet) -> (Vec<f64>, SpatialCache) {
        let (gwea, wcache) = self.weather.forward(p, &patches.weather);
        let mut outs = Vec::with_capacity(5);
        let mut caches = Vec::with_capacity(5);
        for (enc, patch) in self.scalar.iter().zip(&patches.scalar) {
            let (o, c) = enc.forward(p, patch);
            outs.push(o);
            caches.push(c);
        }
        let tsv_in = [outs[0].as_slice(), &outs[1]].concat();
        let jud_in = [outs[2].as_slice(), &outs[3]].concat();
        let tsv_out = self.fusion.tsv.forward_vec(p, &tsv_in);
        let jud_out = self.fusion.jud.forward_vec(p, &jud_in);
        let tsv: Vec<f64> = tsv_out.iter().map(|&v| relu(v)).collect();
        let jud: Vec<f64> = jud_out.iter().map(|&v| relu(v)).collect();
        let g = spatial_representation(&gwea, &tsv, &jud, &outs[4]);
        (g, SpatialCache { weather: wcache, scalar: caches, outs, tsv_in, jud_in, tsv_out, jud_out })
    }

    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &SpatialCache, dg: &[f64]) {
        let d = self.d_g;
        self.weather.backward(p, g, &cache.weather, &dg[..d]);
        let mask = |dv: &[f64], pre: &[f64]| -> Vec<f64> {
            dv.iter().zip(pre).map(|(x, a)| if *a > 0.0 { *x } else { 0.0 }).collect()
        };
        let d_tsv = mask(&dg[d..2 * d], &cache.tsv_out);
        let d_jud = mask(&dg[2 * d..3 * d], &cache.jud_out);
        let mut d_tsv_in = vec![0.0; 2 * d];
        let mut d_jud_in = vec![0.0; 2 * d];
        self.fusion.tsv.backward(p, g, &cache.tsv_in, &d_tsv, Some(&mut d_tsv_in));
        self.fusion.jud.backward(p, g, &cache.jud_in, &d_jud, Some(&mut d_jud_in));
        let douts = [&d_tsv_in[..d], &d_tsv_in[d..], &d_jud_in[..d], &d_jud_in[d..], &dg[3 * d..]];
        for ((enc, c), dout) in self.scalar.iter().zip(&cache.scalar).zip(douts) {
            enc.backward(p, g, c, dout);
        }
        debug_assert_eq!(cache.outs.len(), 5);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn patch(seed: f64, len: usize) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 1.37).sin()).collect()
    }

    #[test]
    fn encoder_output_shape() {
        let mut store = ParamStore::new();
        let enc = ResidualEncoder::new(&mut store, "e", 1, 8, 5, 32, &mut rng());
        let out = encode_channel(&store, &enc, &patch(0.0, 25)).unwrap();
        assert_eq!(out.len(), 32);
        assert!(matches!(encode_channel(&store, &enc, &patch(0.0, 24)), Err(Error::Contract(_))));
    }

    fn zero_convs(store: &mut ParamStore, enc: &ResidualEncoder) {
        for (c1, c2) in enc.conv_layers() {
            for id in [c1.w, c1.b, c2.w, c2.b] {
                store.get_mut(id).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    #[test]
    fn zero_convs_reduce_to_projection() {
        let mut store = ParamStore::new();
        let enc = ResidualEncoder::new(&mut store, "e", 1, 4, 5, 6, &mut rng());
        zero_convs(&mut store, &enc);
        let p1 = patch(0.0, 25);
        let p2 = patch(3.0, 25);
        let out = encode_channel(&store, &enc, &p1).unwrap();
        assert_eq!(out, enc.projection().forward_vec(&store, &p1));

        let e1 = encode_channel(&store, &enc, &p1).unwrap();
        let e2 = encode_channel(&store, &enc, &p2).unwrap();
        let diff: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a - b).collect();
        let w = store.get(enc.projection().w);
        for o in 0..6 {
            let lin: f64 = w[o * 25..(o + 1) * 25].iter().zip(&diff).map(|(a, b)| a * b).sum();
            assert!((e1[o] - e2[o] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let enc = ResidualEncoder::new(&mut store, "e", 2, 2, 3, 3, &mut rng());
        // positive biases keep ReLUs away from their kinks
        for (c1, c2) in enc.conv_layers() {
            store.get_mut(c1.b).iter_mut().for_each(|v| *v = 0.3);
            store.get_mut(c2.b).iter_mut().for_each(|v| *v = 0.2);
        }
        let x = patch(1.0, 18);
        let loss = |p: &ParamStore| enc.forward(p, &x).0.iter().map(|v| v * v).sum::<f64>();
        let (out, cache) = enc.forward(&store, &x);
        let dout: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut g = store.zeros_like();
        enc.backward(&store, &mut g, &cache, &dout);
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
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{k}]: fd {fd} analytic {an}", block.name);
            }
        }
    }

    #[test]
    fn fusion_cases() {
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, 3, &mut rng());
        let gts = [0.5, -0.2, 0.1];
        let gtv = [0.3, 0.4, -0.9];
        // selector weights (I | 0)
        {
            let w = store.get_mut(fusion.tsv.w);
            w.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..3 {
                w[i * 6 + i] = 1.0;
            }
        }
        let (tsv, _) = fuse_pairs(&store, &fusion, &gts, &gtv, &gts, &gtv).unwrap();
        assert_eq!(tsv, vec![0.5, 0.0, 0.1]);

        let zero = store.zeros_like();
        let (a, b) = fuse_pairs(&zero, &fusion, &gts, &gtv, &gts, &gtv).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));

        assert!(fuse_pairs(&store, &fusion, &gts, &gtv[..2], &gts, &gtv).is_err());

        // direct matrix product oracle on the journey pair
        let (_, jud) = fuse_pairs(&store, &fusion, &gts, &gtv, &gtv, &gts).unwrap();
        let w = store.get(fusion.jud.w);
        let b = store.get(fusion.jud.b);
        let cat = [gtv, gts].concat();
        for o in 0..3 {
            let mut acc = b[o];
            for i in 0..6 {
                acc += w[o * 6 + i] * cat[i];
            }
            assert!((jud[o] - acc.max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn representation_layout() {
        let g = spatial_representation(&[1.0; 32], &[2.0; 32], &[3.0; 32], &[4.0; 32]);
        assert_eq!(g.len(), 128);
        assert_eq!(g[32], 2.0);
        assert!(spatial_representation(&[0.0; 2], &[0.0; 2], &[0.0; 2], &[0.0; 2]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_weights_depend_only_on_patch() {
        let mut store = ParamStore::new();
        let block = SpatialBlock::new(&mut store, 3, 2, 4, &mut rng());
        let weather = {
            let mut w = vec![0.0; 36];
            w[..9].iter_mut().for_each(|v| *v = 1.0);
            w
        };
        let ps = PatchSet { weather, scalar: std::array::from_fn(|i| patch(i as f64, 9)) };
        let (a, _) = block.forward(&store, &ps);
        let (b, _) = block.forward(&store, &ps.clone());
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }
}
