//! Five-module toy synthesizer with the inference-path layout of a VITS-style
//! model: text encoder, duration predictor, projection, affine-coupling flow,
//! and a convolutional decoder.
//!
//! Pipeline for `n` tokens:
//!
//! ```text
//! tokens -> embedding -> tanh(lin1) -> tanh(lin2)            text features [n x d]
//!        -> softplus(lin2(relu(lin1)))                         durations     [n]
//!        -> clamp to [1, max_duration], round, repeat rows     frames        [T x d]
//!        -> + frame-position encoding
//!        -> projection                                         mu, logvar    [T x d]
//!        -> z = mu (deterministic) or mu + exp(logvar/2) eps
//!        -> K affine couplings                                 acoustic      [T x d]
//!        -> conv1d -> relu -> conv1d                           output        [T x m]
//! ```
//!
//! Layer paths (reference config, K = 2):
//!
//! | path                          | kind   | d_in_eff | d_out_eff |
//! |-------------------------------|--------|----------|-----------|
//! | `text_encoder.lin1`           | linear | 32       | 32        |
//! | `text_encoder.lin2`           | linear | 32       | 32        |
//! | `duration_predictor.lin1`     | linear | 32       | 32        |
//! | `duration_predictor.lin2`     | linear | 32       | 1         |
//! | `projection.lin1`             | linear | 32       | 64        |
//! | `flow.cpl{i}.scale.lin{1,2}`  | linear | 16       | 16        |
//! | `flow.cpl{i}.shift.lin{1,2}`  | linear | 16       | 16        |
//! | `decoder.conv1`               | conv1d | 96       | 32        |
//! | `decoder.conv2`               | conv1d | 96       | 16        |
//!
//! That is `7 + 4K` layers, 15 for the reference config. The embedding table
//! (`text_encoder.embedding`) is a parameter but not a layer.

use std::fmt;

use crate::error::{Error, Result};
use crate::numkern::ops::{
    relu, relu_backward, softplus, softplus_backward, tanh, tanh_backward,
};
use crate::numkern::{Conv1d, Dense, LayerKind, Linear, Param, RngState, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub flow_layers: usize,
    pub kernel: usize,
    pub max_duration: usize,
    /// Sine/cosine channel pairs of the frame-position encoding, periods
    /// `4, 8, 16, ...` frames.
    pub pos_pairs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            hidden: 32,
            out_dim: 16,
            flow_layers: 2,
            kernel: 3,
            max_duration: 4,
            pos_pairs: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("out_dim", self.out_dim),
            ("kernel", self.kernel),
            ("max_duration", self.max_duration),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.hidden % 2 != 0 {
            return Err(Error::config(format!(
                "hidden {} must be even for channel-split couplings",
                self.hidden
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel {} must be odd", self.kernel)));
        }
        if 2 * self.pos_pairs > self.hidden {
            return Err(Error::config(format!(
                "pos_pairs {} needs more than hidden {} channels",
                self.pos_pairs, self.hidden
            )));
        }
        Ok(())
    }
}

/// Top-level module names, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModuleName {
    TextEncoder,
    DurationPredictor,
    Projection,
    Flow,
    Decoder,
}

impl ModuleName {
    pub const ALL: [ModuleName; 5] = [
        ModuleName::TextEncoder,
        ModuleName::DurationPredictor,
        ModuleName::Projection,
        ModuleName::Flow,
        ModuleName::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleName::TextEncoder => "text_encoder",
            ModuleName::DurationPredictor => "duration_predictor",
            ModuleName::Projection => "projection",
            ModuleName::Flow => "flow",
            ModuleName::Decoder => "decoder",
        }
    }

    /// Module owning a layer path, from its first segment.
    pub fn of_path(path: &str) -> Option<Self> {
        let head = path.split('.').next()?;
        Self::ALL.into_iter().find(|m| m.as_str() == head)
    }
}

impl fmt::Display for ModuleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub path: String,
    pub kind: LayerKind,
    pub d_in_eff: usize,
    pub d_out_eff: usize,
}

/// Initialization scales. The teacher preset spreads durations over the full
/// `[1, max_duration]` range and gives the flow a visible effect.
#[derive(Clone, Debug)]
pub struct InitScheme {
    pub dur_head_std: f64,
    pub dur_head_bias: f32,
    pub flow_std: f64,
    pub out_gain: f64,
}

impl InitScheme {
    pub fn student() -> Self {
        Self {
            dur_head_std: 1.0,
            dur_head_bias: 1.0,
            flow_std: 0.3,
            out_gain: 1.0,
        }
    }

    pub fn teacher() -> Self {
        Self {
            dur_head_std: 2.0,
            dur_head_bias: 2.2,
            flow_std: 0.8,
            out_gain: 1.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Param,
    pub lin1: Linear,
    pub lin2: Linear,
    cache: Option<TextCache>,
}

#[derive(Clone, Debug)]
struct TextCache {
    ids: Vec<usize>,
    h1: Tensor,
    h2: Tensor,
}

impl TextEncoder {
    fn embed(&self, ids: &[usize]) -> Tensor {
        let d = self.embedding.value.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.embedding.value.row(id));
        }
        Tensor::new(&[ids.len(), d], data).expect("non-empty tokens")
    }

    fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let h1 = tanh(&self.lin1.forward(&self.embed(ids))?);
        Ok(tanh(&self.lin2.forward(&h1)?))
    }

    fn forward_train(&mut self, ids: &[usize]) -> Result<Tensor> {
        let e = self.embed(ids);
        let h1 = tanh(&self.lin1.forward_train(&e)?);
        let h2 = tanh(&self.lin2.forward_train(&h1)?);
        self.cache = Some(TextCache {
            ids: ids.to_vec(),
            h1,
            h2: h2.clone(),
        });
        Ok(h2)
    }

    fn has_trainable(&self) -> bool {
        self.embedding.trainable || self.lin1.dense.has_trainable() || self.lin2.dense.has_trainable()
    }

    fn backward(&mut self, dh: &Tensor) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::state("text encoder backward without forward"))?;
        let below = self.embedding.trainable || self.lin1.dense.has_trainable();
        let d2 = tanh_backward(&cache.h2, dh);
        let Some(dh1) = self.lin2.backward_opt(&d2, below)? else {
            return Ok(());
        };
        let d1 = tanh_backward(&cache.h1, &dh1);
        let de = self.lin1.backward_opt(&d1, self.embedding.trainable)?;
        if let Some(de) = de {
            let d = self.embedding.value.cols();
            let mut grad = vec![0.0f32; self.embedding.len()];
            for (row, &id) in cache.ids.iter().enumerate() {
                for (g, v) in grad[id * d..(id + 1) * d].iter_mut().zip(de.row(row)) {
                    *g += v;
                }
            }
            self.embedding.accumulate(&grad);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DurationPredictor {
    pub lin1: Linear,
    pub lin2: Linear,
    cache: Option<(Tensor, Tensor)>,
}

impl DurationPredictor {
    /// Pre-softplus scores `[n x 1]`.
    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&relu(&self.lin1.forward(h)?))
    }

    fn forward_train(&mut self, h: &Tensor) -> Result<Tensor> {
        let pre = self.lin1.forward_train(h)?;
        let raw = self.lin2.forward_train(&relu(&pre))?;
        self.cache = Some((pre, raw.clone()));
        Ok(raw)
    }

    /// Takes the gradient with respect to `softplus(raw)`.
    fn backward(&mut self, d_soft: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (pre, raw) = self
            .cache
            .take()
            .ok_or_else(|| Error::state("duration predictor backward without forward"))?;
        let d_raw = softplus_backward(&raw, d_soft);
        let below = need_dx || self.lin1.dense.has_trainable();
        let Some(dz) = self.lin2.backward_opt(&d_raw, below)? else {
            return Ok(None);
        };
        let dpre = relu_backward(&pre, &dz);
        if !need_dx && !self.lin1.dense.has_trainable() {
            return Ok(None);
        }
        self.lin1.backward_opt(&dpre, need_dx)
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub lin1: Linear,
}

/// Two-layer tanh network used for coupling scales and shifts.
#[derive(Clone, Debug)]
pub struct CouplingNet {
    pub lin1: Linear,
    pub lin2: Linear,
    cache: Option<Tensor>,
}

impl CouplingNet {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&tanh(&self.lin1.forward(x)?))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = tanh(&self.lin1.forward_train(x)?);
        let y = self.lin2.forward_train(&h)?;
        self.cache = Some(h);
        Ok(y)
    }

    fn has_trainable(&self) -> bool {
        self.lin1.dense.has_trainable() || self.lin2.dense.has_trainable()
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let h = self
            .cache
            .take()
            .ok_or_else(|| Error::state("coupling net backward without forward"))?;
        let below = need_dx || self.lin1.dense.has_trainable();
        let Some(dh) = self.lin2.backward_opt(dy, below)? else {
            return Ok(None);
        };
        let dpre = tanh_backward(&h, &dh);
        if !below {
            return Ok(None);
        }
        self.lin1.backward_opt(&dpre, need_dx)
    }

    /// Zero net: output is identically zero.
    pub fn zero(&mut self) {
        for l in [&mut self.lin1, &mut self.lin2] {
            l.dense.weight.value.fill(0.0);
            l.dense.bias.value.fill(0.0);
        }
    }
}

/// `y_b = x_b * exp(s(x_a)) + t(x_a)`, `y_a = x_a`. Even-indexed couplings
/// condition on the first half of the channels, odd ones on the second.
#[derive(Clone, Debug)]
pub struct Coupling {
    pub scale: CouplingNet,
    pub shift: CouplingNet,
    swap: bool,
    cache: Option<(Tensor, Tensor)>,
}

impl Coupling {
    fn halves(&self, x: &Tensor) -> (Tensor, Tensor) {
        let (first, second) = x.split_cols(x.cols() / 2);
        if self.swap {
            (second, first)
        } else {
            (first, second)
        }
    }

    fn join(&self, cond: &Tensor, moved: &Tensor) -> Result<Tensor> {
        if self.swap {
            Tensor::concat_cols(moved, cond)
        } else {
            Tensor::concat_cols(cond, moved)
        }
    }

    fn exp_scale(s: &Tensor) -> Result<Tensor> {
        let e = s.map(f32::exp);
        if !e.all_finite() {
            return Err(Error::Numeric("non-finite coupling scale".into()));
        }
        Ok(e)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (xa, xb) = self.halves(x);
        let es = Self::exp_scale(&self.scale.forward(&xa)?)?;
        let t = self.shift.forward(&xa)?;
        let mut yb = xb;
        for ((v, e), s) in yb.data_mut().iter_mut().zip(es.data()).zip(t.data()) {
            *v = *v * e + s;
        }
        self.join(&xa, &yb)
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let (ya, yb) = self.halves(y);
        let es = Self::exp_scale(&self.scale.forward(&ya)?)?;
        let t = self.shift.forward(&ya)?;
        let mut xb = yb;
        for ((v, e), s) in xb.data_mut().iter_mut().zip(es.data()).zip(t.data()) {
            *v = (*v - s) / e;
        }
        self.join(&ya, &xb)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (xa, xb) = self.halves(x);
        let es = Self::exp_scale(&self.scale.forward_train(&xa)?)?;
        let t = self.shift.forward_train(&xa)?;
        let mut yb = xb.clone();
        for ((v, e), s) in yb.data_mut().iter_mut().zip(es.data()).zip(t.data()) {
            *v = *v * e + s;
        }
        self.cache = Some((xb, es));
        self.join(&xa, &yb)
    }

    fn has_trainable(&self) -> bool {
        self.scale.has_trainable() || self.shift.has_trainable()
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let (xb, es) = self
            .cache
            .take()
            .ok_or_else(|| Error::state("coupling backward without forward"))?;
        let (dya, dyb) = self.halves(dy);
        let mut dxb = dyb.clone();
        let mut ds = dyb.clone();
        for i in 0..dyb.len() {
            let g = dyb.data()[i];
            let e = es.data()[i];
            dxb.data_mut()[i] = g * e;
            ds.data_mut()[i] = g * xb.data()[i] * e;
        }
        let dxa_s = self.scale.backward(&ds, need_dx)?;
        let dxa_t = self.shift.backward(&dyb, need_dx)?;
        if !need_dx {
            return Ok(None);
        }
        let mut dxa = dya;
        for part in [dxa_s, dxa_t].into_iter().flatten() {
            dxa.add_assign(&part)?;
        }
        self.join(&dxa, &dxb).map(Some)
    }
}

#[derive(Clone, Debug)]
pub struct Flow {
    pub couplings: Vec<Coupling>,
}

impl Flow {
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for c in &self.couplings {
            x = c.forward(&x)?;
        }
        Ok(x)
    }

    pub fn inverse(&self, a: &Tensor) -> Result<Tensor> {
        let mut x = a.clone();
        for c in self.couplings.iter().rev() {
            x = c.inverse(&x)?;
        }
        Ok(x)
    }

    fn forward_train(&mut self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.clone();
        for c in &mut self.couplings {
            x = c.forward_train(&x)?;
        }
        Ok(x)
    }

    fn has_trainable(&self) -> bool {
        self.couplings.iter().any(Coupling::has_trainable)
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let n = self.couplings.len();
        let mut grad = dy.clone();
        for i in (0..n).rev() {
            let below = need_dx || self.couplings[..i].iter().any(Coupling::has_trainable);
            match self.couplings[i].backward(&grad, below)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    cache: Option<Tensor>,
}

impl Decoder {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&relu(&self.conv1.forward(x)?))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let pre = self.conv1.forward_train(x)?;
        let y = self.conv2.forward_train(&relu(&pre))?;
        self.cache = Some(pre);
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let pre = self
            .cache
            .take()
            .ok_or_else(|| Error::state("decoder backward without forward"))?;
        let below = need_dx || self.conv1.dense.has_trainable();
        let Some(dh) = self.conv2.backward_opt(dy, below)? else {
            return Ok(None);
        };
        if !below {
            return Ok(None);
        }
        self.conv1.backward_opt(&relu_backward(&pre, &dh), need_dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    /// Clamped per-token durations in frames, before rounding.
    pub durations: Vec<f32>,
    /// Rounded durations used for frame expansion.
    pub frames: Vec<usize>,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub acoustic: Tensor,
    pub output: Tensor,
}

impl SynthOutput {
    pub fn total_frames(&self) -> usize {
        self.frames.iter().sum()
    }
}

pub enum Mode<'a> {
    Deterministic,
    /// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, 1)` from the generator.
    Sampled(&'a mut RngState),
}

/// Quantities a training step needs from one teacher-forced forward pass.
#[derive(Clone, Debug)]
pub struct TrainPass {
    /// `softplus` duration predictions `[n x 1]`, unclamped.
    pub dur_soft: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    config: ModelConfig,
    pub text_encoder: TextEncoder,
    pub duration_predictor: DurationPredictor,
    pub projection: Projection,
    pub flow: Flow,
    pub decoder: Decoder,
    pretrained: bool,
    trace: Option<Vec<usize>>,
}

/// Repeats row `t` of `h` `dur[t]` times.
pub fn expand_by_duration(h: &Tensor, dur: &[usize]) -> Result<Tensor> {
    if dur.len() != h.rows() {
        return Err(Error::shape(format!(
            "{} durations for {} rows",
            dur.len(),
            h.rows()
        )));
    }
    if let Some(i) = dur.iter().position(|&d| d == 0) {
        return Err(Error::input(format!("duration of token {i} is zero")));
    }
    let total: usize = dur.iter().sum();
    let mut data = Vec::with_capacity(total * h.cols());
    for (t, &d) in dur.iter().enumerate() {
        for _ in 0..d {
            data.extend_from_slice(h.row(t));
        }
    }
    Tensor::new(&[total, h.cols()], data)
}

/// Sums frame-level gradients back onto their source rows.
fn collapse_by_duration(dframes: &Tensor, dur: &[usize]) -> Tensor {
    let cols = dframes.cols();
    let mut out = Tensor::zeros(&[dur.len(), cols]);
    let mut f = 0;
    for (t, &d) in dur.iter().enumerate() {
        let row = out.row_mut(t);
        for _ in 0..d {
            for (o, v) in row.iter_mut().zip(dframes.row(f)) {
                *o += v;
            }
            f += 1;
        }
    }
    out
}

/// Amplitude of the frame-position channels.
pub const POS_AMPLITUDE: f64 = 2.0;

/// Fixed frame-position channels: `2 sin/cos(2 pi t / P_j)` in channels
/// `2j, 2j+1` with `P_j = 4 * 2^j`.
pub fn position_encoding(frames: usize, hidden: usize, pairs: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[frames, hidden]);
    for t in 0..frames {
        let row = pe.row_mut(t);
        for j in 0..pairs {
            let period = 4.0 * (1u64 << j) as f64;
            let phase = std::f64::consts::TAU * t as f64 / period;
            row[2 * j] = (POS_AMPLITUDE * phase.sin()) as f32;
            row[2 * j + 1] = (POS_AMPLITUDE * phase.cos()) as f32;
        }
    }
    pe
}

/// Clamps a predicted duration to `[1, max]` and rounds half away from zero.
pub fn round_duration(d: f32, max: usize) -> (f32, usize) {
    let c = d.clamp(1.0, max as f32);
    (c, c.round() as usize)
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, &InitScheme::student())
    }

    pub fn teacher(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, &InitScheme::teacher())
    }

    pub fn with_init(config: ModelConfig, seed: u64, init: &InitScheme) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let d = config.hidden;
        let half = d / 2;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();

        let embedding = Param::new(Tensor::new(
            &[config.vocab, d],
            rng.normal_vec(config.vocab * d, 1.0),
        )?);
        let text_encoder = TextEncoder {
            embedding,
            lin1: Linear::new(d, d, &mut rng, inv(d)),
            lin2: Linear::new(d, d, &mut rng, inv(d)),
            cache: None,
        };

        let mut head = Linear::new(d, 1, &mut rng, init.dur_head_std * inv(d));
        head.dense.bias.value.fill(init.dur_head_bias);
        let duration_predictor = DurationPredictor {
            lin1: Linear::new(d, d, &mut rng, 1.5 * inv(d)),
            lin2: head,
            cache: None,
        };

        let projection = Projection {
            lin1: Linear::new(d, 2 * d, &mut rng, inv(d)),
        };

        let net = |rng: &mut RngState| CouplingNet {
            lin1: Linear::new(half, half, rng, inv(half)),
            lin2: Linear::new(half, half, rng, init.flow_std * inv(half)),
            cache: None,
        };
        let couplings = (0..config.flow_layers)
            .map(|i| Coupling {
                scale: net(&mut rng),
                shift: net(&mut rng),
                swap: i % 2 == 1,
                cache: None,
            })
            .collect();

        let k = config.kernel;
        let decoder = Decoder {
            conv1: Conv1d::new(d, d, k, &mut rng, (2.0f64).sqrt() * inv(d * k))?,
            conv2: Conv1d::new(d, config.out_dim, k, &mut rng, init.out_gain * inv(d * k))?,
            cache: None,
        };

        Ok(Self {
            config,
            text_encoder,
            duration_predictor,
            projection,
            flow: Flow { couplings },
            decoder,
            pretrained: false,
            trace: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn set_pretrained(&mut self, flag: bool) {
        self.pretrained = flag;
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("empty token sequence"));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::input(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab
            )));
        }
        Ok(())
    }

    fn check_frames(&self, tokens: &[usize], frames: &[usize]) -> Result<()> {
        if frames.len() != tokens.len() {
            return Err(Error::input(format!(
                "{} durations for {} tokens",
                frames.len(),
                tokens.len()
            )));
        }
        if let Some(&f) = frames.iter().find(|&&f| f == 0 || f > self.config.max_duration) {
            return Err(Error::input(format!(
                "duration {f} outside 1..={}",
                self.config.max_duration
            )));
        }
        Ok(())
    }

    /// Unclamped `softplus` duration predictions.
    pub fn soft_durations(&self, tokens: &[usize]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        let h = self.text_encoder.forward(tokens)?;
        Ok(softplus(&self.duration_predictor.forward(&h)?).into_data())
    }

    /// Clamped float durations and their rounded frame counts.
    pub fn predict_durations(&self, tokens: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
        self.check_tokens(tokens)?;
        let h = self.text_encoder.forward(tokens)?;
        let soft = softplus(&self.duration_predictor.forward(&h)?);
        Ok(soft
            .data()
            .iter()
            .map(|&v| round_duration(v, self.config.max_duration))
            .unzip())
    }

    pub fn forward(&self, tokens: &[usize], mode: Mode<'_>) -> Result<SynthOutput> {
        self.check_tokens(tokens)?;
        let h = self.text_encoder.forward(tokens)?;
        let soft = softplus(&self.duration_predictor.forward(&h)?);
        let (durations, frames): (Vec<f32>, Vec<usize>) = soft
            .data()
            .iter()
            .map(|&v| round_duration(v, self.config.max_duration))
            .unzip();
        self.decode_frames(&h, durations, frames, mode)
    }

    /// Deterministic output with the given per-token frame counts.
    pub fn render(&self, tokens: &[usize], frames: &[usize]) -> Result<SynthOutput> {
        self.check_tokens(tokens)?;
        self.check_frames(tokens, frames)?;
        let h = self.text_encoder.forward(tokens)?;
        let durations = frames.iter().map(|&f| f as f32).collect();
        self.decode_frames(&h, durations, frames.to_vec(), Mode::Deterministic)
    }

    fn frame_input(&self, h: &Tensor, frames: &[usize]) -> Result<Tensor> {
        let mut x = expand_by_duration(h, frames)?;
        if self.config.pos_pairs > 0 {
            let pe = position_encoding(x.rows(), self.config.hidden, self.config.pos_pairs);
            x.add_assign(&pe)?;
        }
        Ok(x)
    }

    fn decode_frames(
        &self,
        h: &Tensor,
        durations: Vec<f32>,
        frames: Vec<usize>,
        mode: Mode<'_>,
    ) -> Result<SynthOutput> {
        let x = self.frame_input(h, &frames)?;
        let stats = self.projection.lin1.forward(&x)?;
        let (mu, logvar) = stats.split_cols(self.config.hidden);
        let z = match mode {
            Mode::Deterministic => mu.clone(),
            Mode::Sampled(rng) => {
                let mut z = mu.clone();
                for (v, lv) in z.data_mut().iter_mut().zip(logvar.data()) {
                    *v += (lv * 0.5).exp() * rng.normal() as f32;
                }
                z
            }
        };
        let acoustic = self.flow.forward(&z)?;
        let output = self.decoder.forward(&acoustic)?;
        if !output.all_finite() {
            return Err(Error::Numeric("non-finite synthesizer output".into()));
        }
        Ok(SynthOutput {
            durations,
            frames,
            mu,
            logvar,
            acoustic,
            output,
        })
    }

    /// Teacher-forced forward pass (frames expanded by `frames`, `z = mu`)
    /// that records everything [`ToyModel::backward`] needs.
    pub fn forward_train(&mut self, tokens: &[usize], frames: &[usize]) -> Result<TrainPass> {
        self.check_tokens(tokens)?;
        self.check_frames(tokens, frames)?;
        let h = self.text_encoder.forward_train(tokens)?;
        let dur_soft = softplus(&self.duration_predictor.forward_train(&h)?);
        let x = self.frame_input(&h, frames)?;
        let stats = self.projection.lin1.forward_train(&x)?;
        let (mu, _) = stats.split_cols(self.config.hidden);
        let acoustic = self.flow.forward_train(&mu)?;
        let output = self.decoder.forward_train(&acoustic)?;
        self.trace = Some(frames.to_vec());
        Ok(TrainPass { dur_soft, output })
    }

    /// Accumulates gradients into every trainable parameter given the loss
    /// gradients for the output and for `dur_soft`.
    pub fn backward(&mut self, d_output: &Tensor, d_dur_soft: &Tensor) -> Result<()> {
        let frames = self
            .trace
            .take()
            .ok_or_else(|| Error::state("backward without a recorded forward pass"))?;
        let text = self.text_encoder.has_trainable();
        let proj = self.projection.lin1.dense.has_trainable();
        let flow = self.flow.has_trainable();

        let mut dh = Tensor::zeros(&[frames.len(), self.config.hidden]);
        let d_ac = self.decoder.backward(d_output, flow || proj || text)?;
        if let Some(d_ac) = d_ac {
            if let Some(dz) = self.flow.backward(&d_ac, proj || text)? {
                let d_stats = Tensor::concat_cols(&dz, &Tensor::zeros(dz.shape()))?;
                if let Some(dx) = self.projection.lin1.backward_opt(&d_stats, text)? {
                    dh.add_assign(&collapse_by_duration(&dx, &frames))?;
                }
            }
        }
        if let Some(dh_dur) = self.duration_predictor.backward(d_dur_soft, text)? {
            dh.add_assign(&dh_dur)?;
        }
        if text {
            self.text_encoder.backward(&dh)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.text_encoder.embedding.zero_grad();
        for (_, _, dense) in self.layers_mut() {
            dense.zero_grad();
        }
    }

    /// Every linear and conv layer with its path, in pipeline order.
    pub fn layers(&self) -> Vec<(String, LayerRef<'_>)> {
        let mut out = vec![
            ("text_encoder.lin1".to_string(), LayerRef::linear(&self.text_encoder.lin1.dense)),
            ("text_encoder.lin2".to_string(), LayerRef::linear(&self.text_encoder.lin2.dense)),
            ("duration_predictor.lin1".to_string(), LayerRef::linear(&self.duration_predictor.lin1.dense)),
            ("duration_predictor.lin2".to_string(), LayerRef::linear(&self.duration_predictor.lin2.dense)),
            ("projection.lin1".to_string(), LayerRef::linear(&self.projection.lin1.dense)),
        ];
        for (i, c) in self.flow.couplings.iter().enumerate() {
            for (net_name, net) in [("scale", &c.scale), ("shift", &c.shift)] {
                out.push((format!("flow.cpl{i}.{net_name}.lin1"), LayerRef::linear(&net.lin1.dense)));
                out.push((format!("flow.cpl{i}.{net_name}.lin2"), LayerRef::linear(&net.lin2.dense)));
            }
        }
        out.push(("decoder.conv1".to_string(), LayerRef::conv(&self.decoder.conv1.dense)));
        out.push(("decoder.conv2".to_string(), LayerRef::conv(&self.decoder.conv2.dense)));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<(String, LayerKind, &mut Dense)> {
        let ToyModel {
            text_encoder,
            duration_predictor,
            projection,
            flow,
            decoder,
            ..
        } = self;
        collect_layers_mut(
            &mut text_encoder.lin1,
            &mut text_encoder.lin2,
            duration_predictor,
            projection,
            flow,
            decoder,
        )
    }

    pub fn layer_mut(&mut self, path: &str) -> Option<&mut Dense> {
        self.layers_mut()
            .into_iter()
            .find(|(p, _, _)| p == path)
            .map(|(_, _, d)| d)
    }

    pub fn layer_paths(&self) -> Vec<LayerInfo> {
        self.layers()
            .into_iter()
            .map(|(path, l)| LayerInfo {
                path,
                kind: l.kind,
                d_in_eff: l.dense.d_in_eff(),
                d_out_eff: l.dense.d_out_eff(),
            })
            .collect()
    }

    /// Embedding, weights, and biases (no adapter factors), in path order.
    pub fn base_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![(
            "text_encoder.embedding".to_string(),
            &self.text_encoder.embedding,
        )];
        for (path, l) in self.layers() {
            out.push((format!("{path}.weight"), &l.dense.weight));
            out.push((format!("{path}.bias"), &l.dense.bias));
        }
        out
    }

    /// Every parameter including adapter factors, in path order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let ToyModel {
            text_encoder,
            duration_predictor,
            projection,
            flow,
            decoder,
            ..
        } = self;
        let TextEncoder {
            embedding,
            lin1,
            lin2,
            ..
        } = text_encoder;
        let mut out = vec![("text_encoder.embedding".to_string(), embedding)];
        let layers =
            collect_layers_mut(lin1, lin2, duration_predictor, projection, flow, decoder);
        for (path, _, dense) in layers {
            let Dense {
                weight, bias, lora, ..
            } = dense;
            out.push((format!("{path}.weight"), weight));
            out.push((format!("{path}.bias"), bias));
            if let Some(pair) = lora {
                out.push((format!("{path}.lora_a"), &mut pair.a));
                out.push((format!("{path}.lora_b"), &mut pair.b));
            }
        }
        out
    }

    /// Scalar count of all inference-path base parameters.
    pub fn full_param_count(&self) -> usize {
        self.base_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn set_base_trainable(&mut self, trainable: bool) {
        self.text_encoder.embedding.trainable = trainable;
        for (_, _, dense) in self.layers_mut() {
            dense.weight.trainable = trainable;
            dense.bias.trainable = trainable;
        }
    }

    /// CRC32 over every base parameter's path and little-endian data.
    pub fn base_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (path, p) in self.base_params() {
            h.update(path.as_bytes());
            h.update(&p.value.le_bytes());
        }
        h.finalize()
    }

    pub fn adapted_paths(&self) -> Vec<String> {
        self.layers()
            .into_iter()
            .filter(|(_, l)| l.dense.is_adapted())
            .map(|(p, _)| p)
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.layers().iter().any(|(_, l)| l.dense.is_adapted())
    }

    /// Detaches every adapter, returning the detached pairs by path.
    pub fn detach_all(&mut self) -> Result<Vec<(String, crate::lora::LoraPair)>> {
        let mut out = Vec::new();
        for (path, _, dense) in self.layers_mut() {
            if dense.is_adapted() {
                out.push((path, dense.detach()?));
            }
        }
        Ok(out)
    }
}

fn collect_layers_mut<'a>(
    te1: &'a mut Linear,
    te2: &'a mut Linear,
    dp: &'a mut DurationPredictor,
    proj: &'a mut Projection,
    flow: &'a mut Flow,
    dec: &'a mut Decoder,
) -> Vec<(String, LayerKind, &'a mut Dense)> {
    use LayerKind::{Conv1d as C, Linear as L};
    let mut out = vec![
        ("text_encoder.lin1".to_string(), L, &mut te1.dense),
        ("text_encoder.lin2".to_string(), L, &mut te2.dense),
        ("duration_predictor.lin1".to_string(), L, &mut dp.lin1.dense),
        ("duration_predictor.lin2".to_string(), L, &mut dp.lin2.dense),
        ("projection.lin1".to_string(), L, &mut proj.lin1.dense),
    ];
    for (i, c) in flow.couplings.iter_mut().enumerate() {
        for (net_name, net) in [("scale", &mut c.scale), ("shift", &mut c.shift)] {
            out.push((format!("flow.cpl{i}.{net_name}.lin1"), L, &mut net.lin1.dense));
            out.push((format!("flow.cpl{i}.{net_name}.lin2"), L, &mut net.lin2.dense));
        }
    }
    out.push(("decoder.conv1".to_string(), C, &mut dec.conv1.dense));
    out.push(("decoder.conv2".to_string(), C, &mut dec.conv2.dense));
    out
}

#[derive(Clone, Copy, Debug)]
pub struct LayerRef<'a> {
    pub kind: LayerKind,
    pub dense: &'a Dense,
}

impl<'a> LayerRef<'a> {
    fn linear(dense: &'a Dense) -> Self {
        Self {
            kind: LayerKind::Linear,
            dense,
        }
    }

    fn conv(dense: &'a Dense) -> Self {
        Self {
            kind: LayerKind::Conv1d,
            dense,
        }
    }
}
