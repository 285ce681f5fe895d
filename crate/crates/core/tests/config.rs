use loralab::config::ExperimentConfig;
use loralab::Error;
use proptest::prelude::*;

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        (1usize..200, 1usize..32, 1usize..40, 0usize..4, 0usize..3, 1usize..8, 0usize..3),
        (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>()),
        (1e-5f64..1.0, 0usize..5000, 1usize..32, 1usize..16),
        (prop::option::of(0.01f32..64.0), 0.0f64..0.99, 0.0f64..0.9999, 1e-12f64..1e-3, 0.0f64..4.0),
    )
        .prop_map(|(m, seeds, t, o)| {
            let mut c = ExperimentConfig::default();
            c.model.vocab = m.0;
            c.model.hidden = 2 * m.1;
            c.model.out_dim = m.2;
            c.model.flow_layers = m.3;
            c.model.kernel = 2 * m.4 + 1;
            c.model.max_duration = m.5;
            c.model.pos_pairs = m.6.min(m.1);
            c.seed = seeds.0;
            c.teacher_seed = seeds.1;
            c.corpus.seed = seeds.2;
            c.adapt.seed = seeds.3;
            c.adapt.lr = t.0;
            c.adapt.steps = t.1;
            c.adapt.batch = t.2;
            c.rank = t.3;
            c.alpha = o.0;
            for tc in [&mut c.adapt, &mut c.pretrain] {
                tc.beta1 = o.1;
                tc.beta2 = o.2;
                tc.eps = o.3;
                tc.lambda_out = o.4;
                tc.lambda_dur = o.4 / 2.0;
            }
            c
        })
}

proptest! {
    #[test]
    fn text_round_trip(cfg in config_strategy()) {
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn garbage_lines_are_config_errors(key in "[a-z_]{1,12}", value in "[a-z0-9.]{0,8}") {
        let text = format!("{key} = {value}\n");
        match ExperimentConfig::parse(&text) {
            Ok(_) => {}
            Err(e) => prop_assert!(matches!(e, Error::Config(_))),
        }
    }
}

#[test]
fn every_key_is_written_once() {
    let text = ExperimentConfig::default().to_text();
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    let mut uniq = keys.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(keys.len(), uniq.len());
    assert_eq!(keys.len(), 32);
}

#[test]
fn defaults_match_the_reference_setup() {
    let c = ExperimentConfig::default();
    assert_eq!((c.model.vocab, c.model.hidden, c.model.out_dim), (64, 32, 16));
    assert_eq!((c.adapt.steps, c.adapt.batch, c.adapt.lr), (2000, 8, 1e-3));
    assert_eq!(c.corpus.n_utts, 200);
    assert_eq!((c.rank, c.alpha), (4, None));
}
