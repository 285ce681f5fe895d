#![allow(dead_code)]

pub mod layercheck;

use std::sync::OnceLock;

use loralab::config::ExperimentConfig;
use loralab::emodata::{gen_corpus, EmotionCorpus};
use loralab::model::ToyModel;
use loralab::trainer::build_base;

pub struct Setup {
    pub cfg: ExperimentConfig,
    pub base: ToyModel,
    pub corpus: EmotionCorpus,
    pub pretrain_losses: Vec<f64>,
}

fn build(cfg: ExperimentConfig) -> Setup {
    let (base, pretrain_losses) = build_base(&cfg.pretrain_setup()).unwrap();
    let corpus = gen_corpus(&base, &cfg.corpus).unwrap();
    Setup {
        cfg,
        base,
        corpus,
        pretrain_losses,
    }
}

/// Pretrained base and corpus under the default configuration.
pub fn reference() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| build(ExperimentConfig::default()))
}

/// A quickly pretrained base with a short adapter budget.
pub fn small() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = ExperimentConfig::parse("pretrain_steps = 300\nteacher_utts = 48\ncorpus_utts = 40\nsteps = 40\n").unwrap();
        build(cfg)
    })
}
