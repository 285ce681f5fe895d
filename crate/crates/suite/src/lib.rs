//! The reference experiment: one pretrained base, its emotional corpus, and
//! the sweeps run on them under the default configuration. Every result is
//! computed once per process and shared.

use std::sync::OnceLock;

use loralab::adapterio::AdapterBundle;
use loralab::config::ExperimentConfig;
use loralab::emodata::{gen_corpus, Emotion, EmotionCorpus};
use loralab::model::ToyModel;
use loralab::schemes::Scheme;
use loralab::trainer::{build_base, fine_tune_full, rank_sweep, scheme_sweep, train_adapter, RunReport, DEFAULT_RANKS};

/// Rank of the scheme sweep and the plug-and-play bundles.
pub const SWEEP_RANK: usize = 4;
/// Rank of scheme g in the fine-tuning comparison.
pub const COMPARE_RANK: usize = 16;

pub struct Reference {
    pub cfg: ExperimentConfig,
    pub base: ToyModel,
    pub corpus: EmotionCorpus,
    pub pretrain_losses: Vec<f64>,
}

pub fn reference() -> &'static Reference {
    static R: OnceLock<Reference> = OnceLock::new();
    R.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let (base, pretrain_losses) = build_base(&cfg.pretrain_setup()).expect("pretraining");
        let corpus = gen_corpus(&base, &cfg.corpus).expect("corpus");
        Reference {
            cfg,
            base,
            corpus,
            pretrain_losses,
        }
    })
}

type Sweeps = Vec<(Emotion, Vec<RunReport>)>;

/// `tts` baseline plus schemes a-h at [`SWEEP_RANK`], per emotion.
pub fn scheme_sweeps() -> &'static Sweeps {
    static S: OnceLock<Sweeps> = OnceLock::new();
    S.get_or_init(|| {
        let r = reference();
        Emotion::EMOTIONAL
            .iter()
            .map(|&e| {
                let rows = scheme_sweep(&r.base, &Scheme::ALL, e, &r.corpus, SWEEP_RANK, &r.cfg.adapt).expect("sweep");
                (e, rows)
            })
            .collect()
    })
}

/// Scheme g at ranks 2, 4, 8, 16, per emotion.
pub fn rank_sweeps() -> &'static Sweeps {
    static S: OnceLock<Sweeps> = OnceLock::new();
    S.get_or_init(|| {
        let r = reference();
        Emotion::EMOTIONAL
            .iter()
            .map(|&e| {
                let rows = rank_sweep(&r.base, Scheme::G, e, &r.corpus, &DEFAULT_RANKS, &r.cfg.adapt).expect("sweep");
                (e, rows)
            })
            .collect()
    })
}

pub struct Comparison {
    pub emotion: Emotion,
    pub g: RunReport,
    pub fine_tune: RunReport,
    pub fine_tuned: ToyModel,
}

/// Scheme g at [`COMPARE_RANK`] and full fine-tuning, per emotion.
pub fn comparison() -> &'static Vec<Comparison> {
    static S: OnceLock<Vec<Comparison>> = OnceLock::new();
    S.get_or_init(|| {
        let r = reference();
        Emotion::EMOTIONAL
            .iter()
            .map(|&e| {
                let g = rank_sweeps()
                    .iter()
                    .find(|(x, _)| *x == e)
                    .and_then(|(_, rows)| rows.iter().find(|rep| rep.rank == Some(COMPARE_RANK)))
                    .cloned()
                    .expect("rank sweep covers the comparison rank");
                let (fine_tuned, fine_tune) = fine_tune_full(&r.base, e, &r.corpus, &r.cfg.adapt).expect("fine-tune");
                Comparison {
                    emotion: e,
                    g,
                    fine_tune,
                    fine_tuned,
                }
            })
            .collect()
    })
}

/// One scheme-g bundle per emotion at [`SWEEP_RANK`].
pub fn g_bundles() -> &'static Vec<(AdapterBundle, RunReport)> {
    static S: OnceLock<Vec<(AdapterBundle, RunReport)>> = OnceLock::new();
    S.get_or_init(|| {
        let r = reference();
        Emotion::EMOTIONAL
            .iter()
            .map(|&e| train_adapter(&r.base, Scheme::G, e, &r.corpus, SWEEP_RANK, None, &r.cfg.adapt).expect("adapter"))
            .collect()
    })
}
