//! Experiment configuration as `key = value` lines.
//!
//! `#` starts a comment, blank lines are ignored, unknown or repeated keys
//! are errors. Keys not given keep their defaults; [`ExperimentConfig::to_text`]
//! writes every key, so its output is a complete snapshot.

use crate::emodata::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{PretrainSetup, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    /// Student initialization seed.
    pub seed: u64,
    pub teacher_seed: u64,
    pub teacher_corpus: CorpusConfig,
    pub pretrain: TrainConfig,
    pub corpus: CorpusConfig,
    pub adapt: TrainConfig,
    pub rank: usize,
    /// `None` means `alpha = rank`.
    pub alpha: Option<f32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 1,
            teacher_seed: 2,
            teacher_corpus: CorpusConfig {
                n_utts: 256,
                min_len: 4,
                max_len: 12,
                seed: 3,
            },
            pretrain: TrainConfig {
                lr: 3e-3,
                ..TrainConfig::default()
            },
            corpus: CorpusConfig::default(),
            adapt: TrainConfig::default(),
            rank: 4,
            alpha: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: bad value {value:?} for {key}")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher_corpus.validate()?;
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config(format!("alpha {a} must be positive")));
            }
        }
        Ok(())
    }

    pub fn pretrain_setup(&self) -> PretrainSetup {
        PretrainSetup {
            model: self.model.clone(),
            student_seed: self.seed,
            teacher_seed: self.teacher_seed,
            teacher_corpus: self.teacher_corpus.clone(),
            train: self.pretrain.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {line}: expected `key = value`, got {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<()> {
        let m = &mut self.model;
        match key {
            "vocab" => m.vocab = parse(key, v, line)?,
            "hidden" => m.hidden = parse(key, v, line)?,
            "out_dim" => m.out_dim = parse(key, v, line)?,
            "flow_layers" => m.flow_layers = parse(key, v, line)?,
            "kernel" => m.kernel = parse(key, v, line)?,
            "max_duration" => m.max_duration = parse(key, v, line)?,
            "pos_pairs" => m.pos_pairs = parse(key, v, line)?,
            "seed" => self.seed = parse(key, v, line)?,
            "teacher_seed" => self.teacher_seed = parse(key, v, line)?,
            "teacher_utts" => self.teacher_corpus.n_utts = parse(key, v, line)?,
            "teacher_min_len" => self.teacher_corpus.min_len = parse(key, v, line)?,
            "teacher_max_len" => self.teacher_corpus.max_len = parse(key, v, line)?,
            "teacher_corpus_seed" => self.teacher_corpus.seed = parse(key, v, line)?,
            "pretrain_lr" => self.pretrain.lr = parse(key, v, line)?,
            "pretrain_steps" => self.pretrain.steps = parse(key, v, line)?,
            "pretrain_batch" => self.pretrain.batch = parse(key, v, line)?,
            "pretrain_seed" => self.pretrain.seed = parse(key, v, line)?,
            "corpus_utts" => self.corpus.n_utts = parse(key, v, line)?,
            "corpus_min_len" => self.corpus.min_len = parse(key, v, line)?,
            "corpus_max_len" => self.corpus.max_len = parse(key, v, line)?,
            "corpus_seed" => self.corpus.seed = parse(key, v, line)?,
            "lr" => self.adapt.lr = parse(key, v, line)?,
            "steps" => self.adapt.steps = parse(key, v, line)?,
            "batch" => self.adapt.batch = parse(key, v, line)?,
            "adapt_seed" => self.adapt.seed = parse(key, v, line)?,
            "rank" => self.rank = parse(key, v, line)?,
            "alpha" => {
                self.alpha = if v == "auto" {
                    None
                } else {
                    Some(parse(key, v, line)?)
                }
            }
            "beta1" => {
                let b: f64 = parse(key, v, line)?;
                self.pretrain.beta1 = b;
                self.adapt.beta1 = b;
            }
            "beta2" => {
                let b: f64 = parse(key, v, line)?;
                self.pretrain.beta2 = b;
                self.adapt.beta2 = b;
            }
            "adam_eps" => {
                let e: f64 = parse(key, v, line)?;
                self.pretrain.eps = e;
                self.adapt.eps = e;
            }
            "lambda_out" => {
                let l: f64 = parse(key, v, line)?;
                self.pretrain.lambda_out = l;
                self.adapt.lambda_out = l;
            }
            "lambda_dur" => {
                let l: f64 = parse(key, v, line)?;
                self.pretrain.lambda_dur = l;
                self.adapt.lambda_dur = l;
            }
            _ => return Err(Error::config(format!("line {line}: unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its resolved value. Shared optimizer keys are taken
    /// from the adapter settings.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let alpha = self.alpha.map_or_else(|| "auto".to_string(), |a| a.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("vocab", m.vocab.to_string()),
            ("hidden", m.hidden.to_string()),
            ("out_dim", m.out_dim.to_string()),
            ("flow_layers", m.flow_layers.to_string()),
            ("kernel", m.kernel.to_string()),
            ("max_duration", m.max_duration.to_string()),
            ("pos_pairs", m.pos_pairs.to_string()),
            ("seed", self.seed.to_string()),
            ("teacher_seed", self.teacher_seed.to_string()),
            ("teacher_utts", self.teacher_corpus.n_utts.to_string()),
            ("teacher_min_len", self.teacher_corpus.min_len.to_string()),
            ("teacher_max_len", self.teacher_corpus.max_len.to_string()),
            ("teacher_corpus_seed", self.teacher_corpus.seed.to_string()),
            ("pretrain_lr", self.pretrain.lr.to_string()),
            ("pretrain_steps", self.pretrain.steps.to_string()),
            ("pretrain_batch", self.pretrain.batch.to_string()),
            ("pretrain_seed", self.pretrain.seed.to_string()),
            ("corpus_utts", self.corpus.n_utts.to_string()),
            ("corpus_min_len", self.corpus.min_len.to_string()),
            ("corpus_max_len", self.corpus.max_len.to_string()),
            ("corpus_seed", self.corpus.seed.to_string()),
            ("lr", self.adapt.lr.to_string()),
            ("steps", self.adapt.steps.to_string()),
            ("batch", self.adapt.batch.to_string()),
            ("adapt_seed", self.adapt.seed.to_string()),
            ("rank", self.rank.to_string()),
            ("alpha", alpha),
            ("beta1", self.adapt.beta1.to_string()),
            ("beta2", self.adapt.beta2.to_string()),
            ("adam_eps", self.adapt.eps.to_string()),
            ("lambda_out", self.adapt.lambda_out.to_string()),
            ("lambda_dur", self.adapt.lambda_dur.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = ExperimentConfig::parse("# header\n\nrank = 8  # inline\nalpha = 16\n").unwrap();
        assert_eq!(cfg.rank, 8);
        assert_eq!(cfg.alpha, Some(16.0));
    }

    #[test]
    fn errors_name_the_line() {
        let e = ExperimentConfig::parse("rank = 4\nwidth = 3\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("line 2") && m.contains("width")));
        assert!(ExperimentConfig::parse("rank 4").is_err());
        assert!(ExperimentConfig::parse("rank = four").is_err());
        assert!(ExperimentConfig::parse("rank = 4\nrank = 2").is_err());
        assert!(ExperimentConfig::parse("kernel = 4").is_err());
    }
}
