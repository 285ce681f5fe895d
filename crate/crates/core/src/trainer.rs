//! Base pretraining, adapter and full fine-tuning, and the sweeps built on
//! them.
//!
//! Every run minimizes, per utterance,
//! `lambda_out * mse(output, target) + lambda_dur * mse(ln d, ln d_target)`
//! where `d` are the unclamped `softplus` duration predictions and frames are
//! teacher-forced to the target counts. Gradients are averaged over the batch
//! and applied with Adam.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::adapterio::AdapterBundle;
use crate::emodata::{label_counts, rate, test_labels, Emotion, EmotionCorpus, Utterance};
use crate::error::{Error, Result};
use crate::lora::trainable_param_count;
use crate::model::{Mode, ModelConfig, ToyModel};
use crate::numkern::ops::{mse_backward, mse_loss};
use crate::numkern::{Param, RngState, Tensor};
use crate::schemes::{apply, Scheme};

pub const DEFAULT_RANKS: [usize; 4] = [2, 4, 8, 16];

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const ADAPTER_STREAM: u64 = 0x4c4f_5241;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lambda_out: f64,
    pub lambda_dur: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            batch: 8,
            seed: 0,
            lambda_out: 1.0,
            lambda_dur: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        if self.lambda_out < 0.0 || self.lambda_dur < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Adam with `f64` moments keyed by parameter path.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every trainable parameter from its accumulated gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Param)>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// One supervised utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// Frame counts used for teacher forcing.
    pub frames: Vec<usize>,
    /// Duration regression targets.
    pub durations: Vec<f32>,
    pub output: Tensor,
}

/// Neutral targets from a teacher: its deterministic output and its unclamped
/// duration predictions.
pub fn teacher_examples(teacher: &ToyModel, seqs: &[Vec<usize>]) -> Result<Vec<Example>> {
    seqs.iter()
        .map(|tokens| {
            let out = teacher.forward(tokens, Mode::Deterministic)?;
            Ok(Example {
                tokens: tokens.clone(),
                durations: teacher.soft_durations(tokens)?,
                frames: out.frames,
                output: out.output,
            })
        })
        .collect()
}

fn utterance_example(u: &Utterance, emotion: Emotion) -> Example {
    let t = u.target(emotion);
    Example {
        tokens: u.tokens.clone(),
        frames: t.frames.clone(),
        durations: t.frames.iter().map(|&f| f as f32).collect(),
        output: t.output.clone(),
    }
}

/// Training split targets for one emotion.
pub fn emotion_examples(corpus: &EmotionCorpus, emotion: Emotion) -> Vec<Example> {
    corpus.train().map(|u| utterance_example(u, emotion)).collect()
}

fn duration_terms(dur_soft: &Tensor, target: &[f32]) -> (f64, Vec<f64>) {
    let n = target.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(target.len());
    for (&d, &t) in dur_soft.data().iter().zip(target) {
        let d = d as f64;
        let diff = d.ln() - (t as f64).ln();
        loss += diff * diff;
        grad.push(2.0 * diff / (n * d));
    }
    (loss / n, grad)
}

/// Loss of one example with gradients accumulated at `weight`.
fn example_step(model: &mut ToyModel, ex: &Example, cfg: &TrainConfig, weight: f64) -> Result<f64> {
    let pass = model.forward_train(&ex.tokens, &ex.frames)?;
    let out_loss = mse_loss(&pass.output, &ex.output)?;
    let (dur_loss, dur_grad) = duration_terms(&pass.dur_soft, &ex.durations);
    let d_out = mse_backward(&pass.output, &ex.output, cfg.lambda_out * weight)?;
    let scale = cfg.lambda_dur * weight;
    let d_dur = Tensor::new(
        pass.dur_soft.shape(),
        dur_grad.iter().map(|g| (g * scale) as f32).collect(),
    )?;
    model.backward(&d_out, &d_dur)?;
    Ok(cfg.lambda_out * out_loss + cfg.lambda_dur * dur_loss)
}

/// Loss of one example without touching gradients.
pub fn example_loss(model: &ToyModel, ex: &Example, cfg: &TrainConfig) -> Result<f64> {
    let out = model.render(&ex.tokens, &ex.frames)?;
    let soft = model.soft_durations(&ex.tokens)?;
    let soft = Tensor::new(&[soft.len(), 1], soft)?;
    let (dur_loss, _) = duration_terms(&soft, &ex.durations);
    Ok(cfg.lambda_out * mse_loss(&out.output, &ex.output)? + cfg.lambda_dur * dur_loss)
}

/// Mean loss over a data set.
pub fn mean_loss(model: &ToyModel, data: &[Example], cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("no training examples"));
    }
    let mut total = 0.0;
    for ex in data {
        total += example_loss(model, ex, cfg)?;
    }
    Ok(total / data.len() as f64)
}

/// Runs `cfg.steps` Adam steps on minibatches drawn with replacement and
/// returns the per-step batch loss.
pub fn fit(model: &mut ToyModel, data: &[Example], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("no training examples"));
    }
    let mut rng = RngState::derive(cfg.seed, SAMPLE_STREAM);
    let mut adam = Adam::from_config(cfg);
    let weight = 1.0 / cfg.batch as f64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        model.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let ex = &data[rng.below(data.len() as u64) as usize];
            total += example_step(model, ex, cfg, weight).map_err(|e| Error::Training {
                step,
                reason: e.to_string(),
            })?;
        }
        let loss = total * weight;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        adam.step(model.params_mut());
        losses.push(loss);
    }
    model.zero_grad();
    Ok(losses)
}

/// Fits `model` to neutral teacher targets and marks it pretrained.
pub fn pretrain_base(model: &mut ToyModel, teacher_targets: &[Example], cfg: &TrainConfig) -> Result<Vec<f64>> {
    model.set_base_trainable(true);
    let losses = fit(model, teacher_targets, cfg)?;
    model.set_pretrained(true);
    Ok(losses)
}

/// Everything needed to build the pretrained base from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSetup {
    pub model: ModelConfig,
    pub student_seed: u64,
    pub teacher_seed: u64,
    pub teacher_corpus: crate::emodata::CorpusConfig,
    pub train: TrainConfig,
}

/// Teacher model, teacher targets, then a fresh student fitted to them.
pub fn build_base(setup: &PretrainSetup) -> Result<(ToyModel, Vec<f64>)> {
    let teacher = ToyModel::teacher(setup.model.clone(), setup.teacher_seed)?;
    let seqs = crate::emodata::gen_token_seqs(&setup.teacher_corpus, setup.model.vocab)?;
    let targets = teacher_examples(&teacher, &seqs)?;
    let mut student = ToyModel::new(setup.model.clone(), setup.student_seed)?;
    let losses = pretrain_base(&mut student, &targets, &setup.train)?;
    Ok((student, losses))
}

/// One row of a sweep or comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Scheme id, `"tts"` for the plain base or `"fine-tune"`.
    pub scheme: String,
    pub rank: Option<usize>,
    pub emotion: Emotion,
    pub steps: usize,
    /// Mean loss over the training split after training.
    pub final_loss: f64,
    pub match_rate: f64,
    /// Test-split labels per emotion, in [`Emotion::ALL`] order.
    pub label_counts: [usize; 5],
    pub param_count: usize,
    pub wall_time: Duration,
    /// Per-step batch losses.
    pub losses: Vec<f64>,
}

fn report(
    model: &ToyModel,
    scheme: String,
    rank: Option<usize>,
    emotion: Emotion,
    corpus: &EmotionCorpus,
    data: &[Example],
    cfg: &TrainConfig,
    param_count: usize,
    losses: Vec<f64>,
    started: Instant,
) -> Result<RunReport> {
    let labels = test_labels(model, corpus)?;
    Ok(RunReport {
        scheme,
        rank,
        emotion,
        steps: losses.len(),
        final_loss: mean_loss(model, data, cfg)?,
        match_rate: rate(&labels, emotion),
        label_counts: label_counts(&labels),
        param_count,
        wall_time: started.elapsed(),
        losses,
    })
}

fn check_base(base: &ToyModel) -> Result<()> {
    if !base.is_pretrained() {
        return Err(Error::state("base model is not pretrained"));
    }
    if base.has_adapters() {
        return Err(Error::state("base model already carries adapters"));
    }
    Ok(())
}

/// The plain base evaluated against `emotion` (the `tts` column).
pub fn baseline(base: &ToyModel, emotion: Emotion, corpus: &EmotionCorpus, cfg: &TrainConfig) -> Result<RunReport> {
    let started = Instant::now();
    let data = emotion_examples(corpus, emotion);
    report(base, "tts".into(), None, emotion, corpus, &data, cfg, 0, Vec::new(), started)
}

/// Trains a fresh adapter on a copy of `base`. Alpha defaults to `rank`.
pub fn train_adapter(
    base: &ToyModel,
    scheme: Scheme,
    emotion: Emotion,
    corpus: &EmotionCorpus,
    rank: usize,
    alpha: Option<f32>,
    cfg: &TrainConfig,
) -> Result<(AdapterBundle, RunReport)> {
    check_base(base)?;
    cfg.validate()?;
    let started = Instant::now();
    let alpha = alpha.unwrap_or(rank as f32);
    let mut model = base.clone();
    let before = model.base_checksum();
    let mut rng = RngState::derive(cfg.seed, ADAPTER_STREAM);
    apply(&mut model, scheme, rank, alpha, &mut rng)?;
    let data = emotion_examples(corpus, emotion);
    let losses = fit(&mut model, &data, cfg)?;
    let params = trainable_param_count(&model);
    let rep = report(
        &model,
        scheme.id().to_string(),
        Some(rank),
        emotion,
        corpus,
        &data,
        cfg,
        params,
        losses,
        started,
    )?;
    let bundle = AdapterBundle::from_model(&model, emotion, scheme, rank, alpha);
    model.detach_all()?;
    if model.base_checksum() != before {
        return Err(Error::state("base weights changed during adapter training"));
    }
    Ok((bundle, rep))
}

/// Trains every inference-path parameter of a copy of `base`.
pub fn fine_tune_full(
    base: &ToyModel,
    emotion: Emotion,
    corpus: &EmotionCorpus,
    cfg: &TrainConfig,
) -> Result<(ToyModel, RunReport)> {
    check_base(base)?;
    cfg.validate()?;
    let started = Instant::now();
    let mut model = base.clone();
    model.set_base_trainable(true);
    let data = emotion_examples(corpus, emotion);
    let losses = fit(&mut model, &data, cfg)?;
    let params = model.full_param_count();
    let rep = report(&model, "fine-tune".into(), None, emotion, corpus, &data, cfg, params, losses, started)?;
    Ok((model, rep))
}

/// One adapter per rank, same scheme, seed and budget, ordered by rank.
pub fn rank_sweep(
    base: &ToyModel,
    scheme: Scheme,
    emotion: Emotion,
    corpus: &EmotionCorpus,
    ranks: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<RunReport>> {
    let mut ranks = ranks.to_vec();
    ranks.sort_unstable();
    ranks
        .par_iter()
        .map(|&r| train_adapter(base, scheme, emotion, corpus, r, None, cfg).map(|(_, rep)| rep))
        .collect()
}

/// The `tts` baseline followed by one adapter per scheme, same seed and
/// budget.
pub fn scheme_sweep(
    base: &ToyModel,
    schemes: &[Scheme],
    emotion: Emotion,
    corpus: &EmotionCorpus,
    rank: usize,
    cfg: &TrainConfig,
) -> Result<Vec<RunReport>> {
    let mut rows = vec![baseline(base, emotion, corpus, cfg)?];
    let cells: Vec<RunReport> = schemes
        .par_iter()
        .map(|&s| train_adapter(base, s, emotion, corpus, rank, None, cfg).map(|(_, rep)| rep))
        .collect::<Result<_>>()?;
    rows.extend(cells);
    Ok(rows)
}

/// A header row plus data rows, rendered as CSV or aligned text.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
    }

    pub fn to_aligned(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

fn pct(rate: f64) -> String {
    format!("{:.4}", rate)
}

/// Rows per emotion, columns `tts, a..h` (or whatever schemes were swept).
pub fn scheme_table(sweeps: &[(Emotion, Vec<RunReport>)]) -> Table {
    let mut header = vec!["emotion".to_string()];
    if let Some((_, first)) = sweeps.first() {
        header.extend(first.iter().map(|r| r.scheme.clone()));
    }
    let rows = sweeps
        .iter()
        .map(|(e, reps)| {
            let mut row = vec![e.title().to_string()];
            row.extend(reps.iter().map(|r| pct(r.match_rate)));
            row
        })
        .collect();
    Table { header, rows }
}

/// Rows per emotion, columns `r=2, r=4, ...`.
pub fn rank_table(sweeps: &[(Emotion, Vec<RunReport>)]) -> Table {
    let mut header = vec!["emotion".to_string()];
    if let Some((_, first)) = sweeps.first() {
        header.extend(first.iter().map(|r| format!("r={}", r.rank.unwrap_or(0))));
    }
    let rows = sweeps
        .iter()
        .map(|(e, reps)| {
            let mut row = vec![e.title().to_string()];
            row.extend(reps.iter().map(|r| pct(r.match_rate)));
            row
        })
        .collect();
    Table { header, rows }
}

/// Rows per emotion, columns `scheme-g, fine-tune`.
pub fn comparison_table(rows: &[(Emotion, RunReport, RunReport)]) -> Table {
    Table {
        header: vec!["emotion".into(), "scheme-g".into(), "fine-tune".into()],
        rows: rows
            .iter()
            .map(|(e, g, ft)| vec![e.title().to_string(), pct(g.match_rate), pct(ft.match_rate)])
            .collect(),
    }
}

/// Full-precision run records. Wall time is left out so reruns compare
/// byte-for-byte.
pub fn reports_table(reports: &[RunReport]) -> Table {
    let mut header: Vec<String> = ["scheme", "rank", "emotion", "steps", "final_loss", "match_rate"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(Emotion::ALL.iter().map(|e| format!("n_{e}")));
    header.push("params".into());
    let rows = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.scheme.clone(),
                r.rank.map_or_else(String::new, |k| k.to_string()),
                r.emotion.to_string(),
                r.steps.to_string(),
                format!("{:e}", r.final_loss),
                r.match_rate.to_string(),
            ];
            row.extend(r.label_counts.iter().map(|c| c.to_string()));
            row.push(r.param_count.to_string());
            row
        })
        .collect();
    Table { header, rows }
}

/// `step,loss` rows.
pub fn loss_curve_table(losses: &[f64]) -> Table {
    Table {
        header: vec!["step".into(), "loss".into()],
        rows: losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), format!("{l:e}")])
            .collect(),
    }
}
