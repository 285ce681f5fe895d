//! Synthetic emotional corpus.
//!
//! Neutral targets are the pretrained base model's deterministic output.
//! Each emotion rescales the neutral frame counts, re-renders the base model
//! at the new length and applies a fixed gain and time pattern to the result:
//!
//! | emotion  | gain | duration scale | pattern                              |
//! |----------|------|----------------|--------------------------------------|
//! | neutral  | 1.0  | 1.0            | none                                 |
//! | angry    | 1.3  | 0.8            | none                                 |
//! | happy    | 1.0  | 1.0            | `+0.2 * sin(2 pi t / 8)` every channel |
//! | sad      | 0.7  | 1.3            | none                                 |
//! | surprise | 1.0  | 1.0            | `x (1 + 0.5 * [t mod 16 == 0])`      |
//!
//! [`classify`] picks the candidate target nearest to an observation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Mode, ToyModel};
use crate::numkern::{mix64, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Emotion {
    Neutral,
    Angry,
    Happy,
    Sad,
    Surprise,
}

impl Emotion {
    /// Also the tie-break order of [`classify`].
    pub const ALL: [Emotion; 5] = [
        Emotion::Neutral,
        Emotion::Angry,
        Emotion::Happy,
        Emotion::Sad,
        Emotion::Surprise,
    ];

    /// The four emotions adapters are trained for.
    pub const EMOTIONAL: [Emotion; 4] = [Emotion::Angry, Emotion::Happy, Emotion::Sad, Emotion::Surprise];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Sad => "sad",
            Emotion::Surprise => "surprise",
        }
    }

    /// Capitalized name used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            Emotion::Neutral => "Neutral",
            Emotion::Angry => "Angry",
            Emotion::Happy => "Happy",
            Emotion::Sad => "Sad",
            Emotion::Surprise => "Surprise",
        }
    }

    pub fn transform(self) -> EmotionTransform {
        let (gain, dur_scale, pattern) = match self {
            Emotion::Neutral => (1.0, 1.0, Pattern::None),
            Emotion::Angry => (1.3, 0.8, Pattern::None),
            Emotion::Happy => (1.0, 1.0, Pattern::Sine { amplitude: 0.2, period: 8 }),
            Emotion::Sad => (0.7, 1.3, Pattern::None),
            Emotion::Surprise => (1.0, 1.0, Pattern::Spikes { extra: 0.5, period: 16 }),
        };
        EmotionTransform { gain, dur_scale, pattern }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Emotion::ALL
            .into_iter()
            .find(|e| e.name() == lower)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown emotion {s:?} (expected neutral, angry, happy, sad or surprise)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pattern {
    None,
    /// `+ amplitude * sin(2 pi t / period)` on every channel of frame `t`.
    Sine { amplitude: f64, period: usize },
    /// Frame `t` multiplied by `1 + extra` when `t mod period == 0`.
    Spikes { extra: f64, period: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmotionTransform {
    pub gain: f64,
    pub dur_scale: f64,
    pub pattern: Pattern,
}

impl EmotionTransform {
    fn is_identity(&self) -> bool {
        self.gain == 1.0 && self.dur_scale == 1.0 && self.pattern == Pattern::None
    }

    /// `clamp(round(dur_scale * d), 1, max)` per token, half away from zero.
    pub fn scale_durations(&self, frames: &[usize], max: usize) -> Vec<usize> {
        frames
            .iter()
            .map(|&d| ((self.dur_scale * d as f64).round() as usize).clamp(1, max))
            .collect()
    }

    /// Gain and time pattern on a `[frames x channels]` output.
    pub fn transform_output(&self, output: &Tensor) -> Tensor {
        if self.is_identity() {
            return output.clone();
        }
        let mut out = output.clone();
        for t in 0..out.rows() {
            let (factor, offset) = match self.pattern {
                Pattern::None => (self.gain, 0.0),
                Pattern::Sine { amplitude, period } => (
                    self.gain,
                    amplitude * (std::f64::consts::TAU * t as f64 / period as f64).sin(),
                ),
                Pattern::Spikes { extra, period } => {
                    let spike = if t % period == 0 { 1.0 + extra } else { 1.0 };
                    (self.gain * spike, 0.0)
                }
            };
            for v in out.row_mut(t) {
                *v = (factor * *v as f64 + offset) as f32;
            }
        }
        out
    }
}

/// Frame counts and output features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub frames: Vec<usize>,
    pub output: Tensor,
}

impl Target {
    pub fn total_frames(&self) -> usize {
        self.frames.iter().sum()
    }
}

/// Emotional target derived from the neutral frame counts of `tokens`.
pub fn apply_emotion(
    base: &ToyModel,
    tokens: &[usize],
    neutral_frames: &[usize],
    emotion: Emotion,
) -> Result<Target> {
    let tf = emotion.transform();
    let frames = tf.scale_durations(neutral_frames, base.config().max_duration);
    let rendered = base.render(tokens, &frames)?;
    Ok(Target {
        output: tf.transform_output(&rendered.output),
        frames,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Roughly one utterance in five goes to the test split.
pub fn split_of(index: usize) -> Split {
    if mix64(index as u64) % 5 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub split: Split,
    /// Indexed by [`Emotion::index`].
    pub targets: Vec<Target>,
}

impl Utterance {
    pub fn target(&self, emotion: Emotion) -> &Target {
        &self.targets[emotion.index()]
    }

    pub fn neutral(&self) -> &Target {
        self.target(Emotion::Neutral)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utts: 200,
            min_len: 4,
            max_len: 12,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_utts < 2 {
            return Err(Error::config(format!("n_utts {} must be at least 2", self.n_utts)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "length range {}..={} is empty or starts at 0",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Token sequences with uniform lengths in the configured range and tokens
/// uniform over `vocab`.
pub fn gen_token_seqs(cfg: &CorpusConfig, vocab: usize) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut rng = RngState::new(cfg.seed);
    let span = (cfg.max_len - cfg.min_len + 1) as u64;
    Ok((0..cfg.n_utts)
        .map(|_| {
            let len = cfg.min_len + rng.below(span) as usize;
            (0..len).map(|_| rng.below(vocab as u64) as usize).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionCorpus {
    pub utterances: Vec<Utterance>,
    /// [`ToyModel::base_checksum`] of the model that produced the targets.
    pub base_checksum: u32,
}

impl EmotionCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> + '_ {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn train(&self) -> impl Iterator<Item = &Utterance> + '_ {
        self.split(Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Utterance> + '_ {
        self.split(Split::Test)
    }
}

pub fn gen_corpus(base: &ToyModel, cfg: &CorpusConfig) -> Result<EmotionCorpus> {
    if !base.is_pretrained() {
        return Err(Error::state("corpus generation needs a pretrained base model"));
    }
    let seqs = gen_token_seqs(cfg, base.config().vocab)?;
    let mut splits: Vec<Split> = (0..seqs.len()).map(split_of).collect();
    if !splits.contains(&Split::Test) {
        *splits.last_mut().expect("n_utts >= 2") = Split::Test;
    }
    if !splits.contains(&Split::Train) {
        splits[0] = Split::Train;
    }
    let utterances = seqs
        .into_iter()
        .zip(splits)
        .map(|(tokens, split)| {
            let neutral = base.forward(&tokens, Mode::Deterministic)?;
            let targets = Emotion::ALL
                .into_iter()
                .map(|e| apply_emotion(base, &tokens, &neutral.frames, e))
                .collect::<Result<Vec<_>>>()?;
            Ok(Utterance { tokens, split, targets })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmotionCorpus {
        utterances,
        base_checksum: base.base_checksum(),
    })
}

/// Distance from an observation to each candidate, in [`Emotion::ALL`] order.
///
/// Sum of the L2 distance between log frame counts, the root mean square of
/// per-frame feature distances over the overlapping frames, and
/// `|ln T_obs - ln T_e|`.
pub fn distances(frames: &[usize], output: &Tensor, utt: &Utterance) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (slot, target) in out.iter_mut().zip(&utt.targets) {
        let dur: f64 = frames
            .iter()
            .zip(&target.frames)
            .map(|(&o, &e)| ((o.max(1) as f64).ln() - (e as f64).ln()).powi(2))
            .sum::<f64>()
            .sqrt();
        let overlap = output.rows().min(target.output.rows());
        let mut sq = 0.0;
        for t in 0..overlap {
            sq += output
                .row(t)
                .iter()
                .zip(target.output.row(t))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>();
        }
        let feat = if overlap > 0 { (sq / overlap as f64).sqrt() } else { 0.0 };
        let len = ((output.rows().max(1) as f64).ln() - (target.output.rows() as f64).ln()).abs();
        *slot = dur + feat + len;
    }
    out
}

/// Nearest candidate; ties go to the earlier emotion in [`Emotion::ALL`].
pub fn classify(frames: &[usize], output: &Tensor, utt: &Utterance) -> Emotion {
    let d = distances(frames, output, utt);
    let mut best = 0;
    for i in 1..d.len() {
        if d[i] < d[best] {
            best = i;
        }
    }
    Emotion::ALL[best]
}

/// Labels the model's deterministic output for every test utterance.
pub fn test_labels(model: &ToyModel, corpus: &EmotionCorpus) -> Result<Vec<Emotion>> {
    let test: Vec<&Utterance> = corpus.test().collect();
    if test.is_empty() {
        return Err(Error::input("empty test split"));
    }
    test.par_iter()
        .map(|u| {
            let out = model.forward(&u.tokens, Mode::Deterministic)?;
            Ok(classify(&out.frames, &out.output, u))
        })
        .collect()
}

/// Fraction of test utterances classified as `emotion`.
pub fn match_rate(model: &ToyModel, emotion: Emotion, corpus: &EmotionCorpus) -> Result<f64> {
    let labels = test_labels(model, corpus)?;
    Ok(rate(&labels, emotion))
}

pub fn rate(labels: &[Emotion], emotion: Emotion) -> f64 {
    labels.iter().filter(|&&l| l == emotion).count() as f64 / labels.len() as f64
}

/// Per-emotion counts in [`Emotion::ALL`] order.
pub fn label_counts(labels: &[Emotion]) -> [usize; 5] {
    let mut counts = [0; 5];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angry_durations_by_hand() {
        let tf = Emotion::Angry.transform();
        assert_eq!(tf.scale_durations(&[2, 3, 1, 4], 4), vec![2, 2, 1, 3]);
        let sad = Emotion::Sad.transform();
        assert_eq!(sad.scale_durations(&[1, 2, 3, 4], 4), vec![1, 3, 4, 4]);
    }

    #[test]
    fn neutral_is_bitwise_identity() {
        let t = Tensor::new(&[2, 2], vec![-0.0, 1.5, f32::MIN_POSITIVE, -3.25]).unwrap();
        let out = Emotion::Neutral.transform().transform_output(&t);
        assert!(out.bit_eq(&t));
    }

    #[test]
    fn sad_gain_on_constant() {
        let t = Tensor::full(&[5, 3], 1.0);
        let out = Emotion::Sad.transform().transform_output(&t);
        assert!(out.data().iter().all(|&v| v == 0.7f32));
    }

    #[test]
    fn surprise_spikes_every_sixteenth_frame() {
        let t = Tensor::full(&[18, 2], 2.0);
        let out = Emotion::Surprise.transform().transform_output(&t);
        assert_eq!(out.row(0), &[3.0, 3.0]);
        assert_eq!(out.row(16), &[3.0, 3.0]);
        assert_eq!(out.row(17), &[2.0, 2.0]);
        assert_eq!(out.row(1), &[2.0, 2.0]);
    }

    #[test]
    fn happy_sine_on_zero() {
        let out = Emotion::Happy.transform().transform_output(&Tensor::zeros(&[9, 1]));
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[2] - 0.2).abs() < 1e-7);
        assert!((out.data()[6] + 0.2).abs() < 1e-7);
        assert!(out.data()[8].abs() < 1e-7);
    }

    #[test]
    fn parse_names() {
        assert_eq!("Angry".parse::<Emotion>().unwrap(), Emotion::Angry);
        assert!(matches!("calm".parse::<Emotion>(), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_roughly_a_fifth() {
        let test = (0..1000).filter(|&i| split_of(i) == Split::Test).count();
        assert!((150..250).contains(&test), "{test}");
    }
}
