//! The two forecasting networks plus the LSTM-only ablation.
//!
//! A single-day encoder turns one window of one day into `h_T`:
//! semantic attention synthesizes a gap series from similar regions, the
//! spatial block encodes each interval's neighborhood, both are concatenated
//! per interval and run through an LSTM. ARLP feeds `h_T` to the head; the
//! multi-day variant encodes `D` aligned days with the same weights, attends
//! over them and feeds `[h_{T,D}, h^L]` to the head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleWindow};
use crate::error::{Error, Result};
use crate::grid::{Channel, GridSpec};
use crate::nn::{Lstm, LstmCache, ParamId, ParamStore};
use crate::semantic::{
    similarity_maps, synthesize, synthesize_backward, AttentionOutcome, ChannelWeights, SimilarityMaps, DEFAULT_BETA,
};
use crate::spatial::{PatchSet, SpatialBlock, SpatialCache};
use crate::temporal::{build_feature_sequence, lstm_encode, DayAttention, HeadCache, PredictHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Current-day model.
    Arlp,
    /// Multi-day model with attention over days.
    Advanced,
    /// Plain LSTM on the target's own gap series (semantic and spatial blocks removed).
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Arlp => "arlp",
            ModelKind::Advanced => "advanced_arlp",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            ModelKind::Arlp => 0,
            ModelKind::Advanced => 1,
            ModelKind::Lstm => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ModelKind::Arlp),
            1 => Some(ModelKind::Advanced),
            2 => Some(ModelKind::Lstm),
            _ => None,
        }
    }

    /// Days of data each sample needs.
    pub fn history(self, grid: &GridSpec) -> usize {
        match self {
            ModelKind::Advanced => grid.history_days,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform fan-in scaling, seeded.
    #[default]
    Uniform,
    /// Every layer zero; semantic channel weights keep their uniform start.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of each spatial encoder.
    pub d_g: usize,
    /// Hidden width of the residual convolutions.
    pub channel_width: usize,
    /// LSTM hidden size (also the head's hidden width).
    pub d_h: usize,
    pub beta: f64,
    /// Divide the synthesized series by `Σ fa`.
    pub normalize_semantic: bool,
    pub init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_g: 32, channel_width: 8, d_h: 64, beta: DEFAULT_BETA, normalize_semantic: false, init: Init::Uniform }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_g == 0 || self.channel_width == 0 || self.d_h == 0 {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: ModelKind,
    grid: GridSpec,
    config: ModelConfig,
    semantic_w: Option<ParamId>,
    semantic_b: Option<ParamId>,
    spatial: Option<SpatialBlock>,
    lstm: Lstm,
    head: PredictHead,
}

/// Everything the backward pass needs from one day's encoding.
#[derive(Debug, Clone)]
pub struct DayCache {
    semantic: Option<(SimilarityMaps, AttentionOutcome, Vec<f64>)>,
    spatial: Vec<SpatialCache>,
    lstm: LstmCache,
}

impl DayCache {
    pub fn attention(&self) -> Option<&AttentionOutcome> {
        self.semantic.as_ref().map(|(_, a, _)| a)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    days: Vec<DayCache>,
    states: Vec<Vec<f64>>,
    day_attention: Option<DayAttention>,
    head: HeadCache,
    pub prediction: f64,
}

impl ForwardCache {
    pub fn day_attention(&self) -> Option<&DayAttention> {
        self.day_attention.as_ref()
    }

    pub fn day_states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// Semantic attention of the current (last) day.
    pub fn attention(&self) -> Option<&AttentionOutcome> {
        self.days.last().and_then(|d| d.attention())
    }
}

impl Model {
    /// Builds the layout and initial parameters.
    pub fn new(kind: ModelKind, grid: GridSpec, config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        grid.validate()?;
        config.validate()?;
        if kind == ModelKind::Advanced && grid.history_days < 2 {
            return Err(Error::Config(
                "the multi-day model needs history_days >= 2; use ARLP for a single day".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (semantic_w, semantic_b, spatial, input) = if kind == ModelKind::Lstm {
            (None, None, None, 1)
        } else {
            let d = ChannelWeights::default();
            let w = store.add("semantic.w", vec![4], d.w.to_vec());
            let b = store.add("semantic.b", vec![1], vec![d.b]);
            let block = SpatialBlock::new(&mut store, grid.neighborhood, config.channel_width, config.d_g, &mut rng);
            let input = block.output_dim() + 1;
            (Some(w), Some(b), Some(block), input)
        };
        let lstm = Lstm::new(&mut store, "lstm", input, config.d_h, &mut rng);
        let head_in = if kind == ModelKind::Advanced { 2 * config.d_h } else { config.d_h };
        let head = PredictHead::new(&mut store, head_in, config.d_h, &mut rng);
        if config.init == Init::Zero {
            for block in store.blocks_mut() {
                if block.name != "semantic.w" {
                    block.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok((Model { kind, grid, config, semantic_w, semantic_b, spatial, lstm, head }, store))
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &PredictHead {
        &self.head
    }

    pub fn lstm(&self) -> &Lstm {
        &self.lstm
    }

    pub fn spatial(&self) -> Option<&SpatialBlock> {
        self.spatial.as_ref()
    }

    pub fn history(&self) -> usize {
        self.kind.history(&self.grid)
    }

    pub fn channel_weights(&self, p: &ParamStore) -> Option<ChannelWeights> {
        let (w, b) = (self.semantic_w?, self.semantic_b?);
        let w = p.get(w);
        Some(ChannelWeights { w: [w[0], w[1], w[2], w[3]], b: p.get(b)[0] })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.grid() != &self.grid {
            return Err(Error::Config("dataset grid does not match the model grid".into()));
        }
        Ok(())
    }

    /// Semantic attention for one window and target.
    pub fn attention(&self, p: &ParamStore, data: &Dataset, day: usize, start: usize, region: usize) -> Result<AttentionOutcome> {
        let weights = self
            .channel_weights(p)
            .ok_or_else(|| Error::Config("model has no semantic block".into()))?;
        let maps = similarity_maps(data.window_acf(day, start), region)?;
        AttentionOutcome::compute(&maps, &weights, self.config.beta)
    }

    /// Encodes the window `start..start+T` of `day` for `region` into `h_T`.
    pub fn encode_day(&self, p: &ParamStore, data: &Dataset, day: usize, start: usize, region: usize) -> Result<(Vec<f64>, DayCache)> {
        let t = self.grid.window;
        let cube = data.cube();
        let Some(spatial) = &self.spatial else {
            let feats: Vec<Vec<f64>> = (0..t).map(|j| vec![cube.at(Channel::Gap, day, start + j, region)]).collect();
            let (h, lstm) = lstm_encode(p, &self.lstm, &feats)?;
            return Ok((h, DayCache { semantic: None, spatial: Vec::new(), lstm }));
        };

        let weights = self.channel_weights(p).expect("semantic block present");
        let maps = similarity_maps(data.window_acf(day, start), region)?;
        let att = AttentionOutcome::compute(&maps, &weights, self.config.beta)?;
        let gaps = data.gap_window(day, start);
        let s = synthesize(&gaps, &att.fa, t, self.config.normalize_semantic)?;

        let mut gs = Vec::with_capacity(t);
        let mut caches = Vec::with_capacity(t);
        for j in 0..t {
            let patches = PatchSet::from_cube(cube, day, start + j, region, self.grid.neighborhood);
            let (g, c) = spatial.forward(p, &patches);
            gs.push(g);
            caches.push(c);
        }
        let feats = build_feature_sequence(&gs, &s)?;
        let (h, lstm) = lstm_encode(p, &self.lstm, &feats)?;
        Ok((h, DayCache { semantic: Some((maps, att, gaps)), spatial: caches, lstm }))
    }

    fn backward_day(&self, p: &ParamStore, g: &mut ParamStore, cache: &DayCache, dh: &[f64]) {
        let dxs = self.lstm.backward(p, g, &cache.lstm, dh);
        let (Some(spatial), Some((maps, att, gaps))) = (&self.spatial, &cache.semantic) else {
            return;
        };
        let t = self.grid.window;
        let width = spatial.output_dim();
        let d_s: Vec<f64> = dxs.iter().map(|dx| dx[width]).collect();
        let d_fa = synthesize_backward(gaps, &att.fa, t, self.config.normalize_semantic, &d_s);
        let dw = att.backward(maps, &d_fa);
        for (a, d) in g.get_mut(self.semantic_w.expect("semantic")).iter_mut().zip(dw.w) {
            *a += d;
        }
        g.get_mut(self.semantic_b.expect("semantic"))[0] += dw.b;
        for (c, dx) in cache.spatial.iter().zip(&dxs) {
            spatial.backward(p, g, c, &dx[..width]);
        }
    }

    /// Current-day prediction.
    pub fn forward_arlp(&self, p: &ParamStore, data: &Dataset, sample: &SampleWindow) -> Result<ForwardCache> {
        let (h, day) = self.encode_day(p, data, sample.day, sample.start, sample.region)?;
        let (y, head) = self.head.forward(p, &h)?;
        Ok(ForwardCache { days: vec![day], states: vec![h], day_attention: None, head, prediction: y })
    }

    /// Multi-day prediction from the `D` days ending on `sample.day`.
    pub fn forward_advanced(&self, p: &ParamStore, data: &Dataset, sample: &SampleWindow) -> Result<ForwardCache> {
        let d = self.grid.history_days;
        if d < 2 {
            return Err(Error::Config("multi-day prediction needs at least two days".into()));
        }
        if sample.day + 1 < d {
            return Err(Error::Bounds(format!("day {} has fewer than {d} days of history", sample.day)));
        }
        let first = sample.day + 1 - d;
        let mut days = Vec::with_capacity(d);
        let mut states = Vec::with_capacity(d);
        for day in first..=sample.day {
            let (h, c) = self.encode_day(p, data, day, sample.start, sample.region)?;
            states.push(h);
            days.push(c);
        }
        let att = DayAttention::compute(&states)?;
        debug_assert!(att.fallback || (att.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let joint = [states[d - 1].as_slice(), &att.long_term].concat();
        let (y, head) = self.head.forward(p, &joint)?;
        Ok(ForwardCache { days, states, day_attention: Some(att), head, prediction: y })
    }

    pub fn forward(&self, p: &ParamStore, data: &Dataset, sample: &SampleWindow) -> Result<ForwardCache> {
        self.check_dataset(data)?;
        match self.kind {
            ModelKind::Advanced => self.forward_advanced(p, data, sample),
            _ => self.forward_arlp(p, data, sample),
        }
    }

    pub fn predict(&self, p: &ParamStore, data: &Dataset, sample: &SampleWindow) -> Result<f64> {
        Ok(self.forward(p, data, sample)?.prediction)
    }

    /// Accumulates `dŷ · ∂ŷ/∂θ` into `g`.
    pub fn backward(&self, p: &ParamStore, g: &mut ParamStore, cache: &ForwardCache, dy: f64) {
        let dx = self.head.backward(p, g, &cache.head, dy);
        match &cache.day_attention {
            None => self.backward_day(p, g, &cache.days[0], &dx),
            Some(att) => {
                let hd = self.config.d_h;
                let mut d_states = att.backward(&cache.states, &dx[hd..]);
                let last = d_states.len() - 1;
                for (a, v) in d_states[last].iter_mut().zip(&dx[..hd]) {
                    *a += v;
                }
                for (day, dh) in cache.days.iter().zip(&d_states) {
                    self.backward_day(p, g, day, dh);
                }
            }
        }
    }
}
