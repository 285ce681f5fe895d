//! One line per acceptance criterion on the reference experiment, then the
//! result tables. Exits non-zero if any criterion fails.

#[path = "../../core/tests/common/layercheck.rs"]
#[allow(dead_code)]
mod layercheck;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use loralab::adapterio::{
    base_to_container, corpus_from_container, corpus_to_container, swap, AdapterBundle, AdapterRegistry, Container,
};
use loralab::emodata::{apply_emotion, classify, test_labels, Emotion};
use loralab::lora::trainable_param_count;
use loralab::model::{Mode, ToyModel};
use loralab::numkern::{Conv1d, Dense, Linear, RngState, Tensor};
use loralab::schemes::{apply, Scheme};
use loralab::trainer::{comparison_table, emotion_examples, fit, rank_table, scheme_table, Table};
use loralab_suite::{comparison, g_bundles, rank_sweeps, reference, scheme_sweeps, COMPARE_RANK, SWEEP_RANK};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_utterances(n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|_| {
            let len = 4 + rng.below(9) as usize;
            (0..len).map(|_| rng.below(64) as usize).collect()
        })
        .collect()
}

fn test_outputs(m: &ToyModel) -> Vec<Vec<u8>> {
    reference()
        .corpus
        .test()
        .map(|u| m.forward(&u.tokens, Mode::Deterministic).unwrap().output.le_bytes())
        .collect()
}

fn zero_init_identity() -> Outcome {
    let base = &reference().base;
    let utts = random_utterances(50, 101);
    let mut mismatches = 0;
    for s in Scheme::ALL {
        let mut m = base.clone();
        apply(&mut m, s, SWEEP_RANK, SWEEP_RANK as f32, &mut RngState::new(5)).unwrap();
        for toks in &utts {
            let a = base.forward(toks, Mode::Deterministic).unwrap();
            let b = m.forward(toks, Mode::Deterministic).unwrap();
            if a.frames != b.frames || !a.output.bit_eq(&b.output) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("8 schemes x 50 utterances, {mismatches} differ bitwise"))
}

fn merge_equivalence() -> Outcome {
    let mut worst = 0.0f32;
    for seed in 0..100u64 {
        let mut rng = RngState::new(seed);
        let d_in = 1 + rng.below(24) as usize;
        let d_out = 1 + rng.below(24) as usize;
        let t = 1 + rng.below(12) as usize;
        let conv = seed % 2 == 1;
        let (mut dense, x, forward): (Dense, Tensor, Box<dyn Fn(&Dense, &Tensor) -> Tensor>) = if conv {
            let k = [1, 3, 5][rng.below(3) as usize];
            let c = Conv1d::new(d_in, d_out, k, &mut rng, 0.5).unwrap();
            let x = layercheck::uniform(&mut rng, &[t, d_in]);
            let f = move |d: &Dense, x: &Tensor| {
                let mut c = c.clone();
                c.dense = d.clone();
                c.forward(x).unwrap()
            };
            (Conv1d::new(d_in, d_out, k, &mut RngState::new(seed), 0.5).unwrap().dense, x, Box::new(f))
        } else {
            let l = Linear::new(d_in, d_out, &mut rng, 0.5);
            let x = layercheck::uniform(&mut rng, &[t, d_in]);
            let dense = l.dense.clone();
            let f = move |d: &Dense, x: &Tensor| {
                let mut l = l.clone();
                l.dense = d.clone();
                l.forward(x).unwrap()
            };
            (dense, x, Box::new(f))
        };
        let r = 1 + rng.below(d_in.min(d_out) as u64) as usize;
        dense.attach(r, rng.uniform(0.5, 8.0) as f32, &mut rng).unwrap();
        layercheck::randomize_b(&mut dense, &mut rng);
        let unmerged = forward(&dense, &x);
        dense.merge().unwrap();
        worst = worst.max(forward(&dense, &x).max_abs_diff(&unmerged).unwrap());
    }
    outcome(worst <= 1e-5, format!("100 layers, max |merged - unmerged| = {worst:.3e}"))
}

fn gradient_correctness() -> Outcome {
    let lin = layercheck::linear_worst(0..20);
    let conv = layercheck::conv_worst(0..20);
    outcome(
        lin < 1e-4 && conv < 1e-4,
        format!("20 seeds per kind, worst relative error linear {lin:.2e}, conv {conv:.2e}"),
    )
}

fn frozen_base() -> Outcome {
    let r = reference();
    let checkpoint = crc32(&base_to_container(&r.base).encode().unwrap());
    let mut m = r.base.clone();
    apply(&mut m, Scheme::H, SWEEP_RANK, SWEEP_RANK as f32, &mut RngState::new(0)).unwrap();
    let losses = fit(&mut m, &emotion_examples(&r.corpus, Emotion::Angry), &r.cfg.adapt).unwrap();
    let during = m.base_checksum();
    m.detach_all().unwrap();
    let after = crc32(&base_to_container(&m).encode().unwrap());
    outcome(
        losses.len() == 2000 && during == r.base.base_checksum() && after == checkpoint,
        format!("{} steps, checkpoint crc {checkpoint:08x} -> {after:08x}", losses.len()),
    )
}

fn crc32(bytes: &[u8]) -> u32 {
    // the container's own trailing CRC covers every preceding byte
    u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
}

fn hot_swap() -> Outcome {
    let r = reference();
    let pristine = test_outputs(&r.base);
    let mut reg = AdapterRegistry::new();
    let mut round_trips = 0;
    for (b, _) in g_bundles() {
        let bytes = b.to_bytes().unwrap();
        let back = AdapterBundle::from_bytes(&bytes).unwrap();
        if &back == b && back.to_bytes().unwrap() == bytes {
            round_trips += 1;
        }
        reg.insert(back);
    }
    let corpus_bytes = corpus_to_container(&r.corpus).unwrap().encode().unwrap();
    let corpus_ok = corpus_from_container(Container::decode(&corpus_bytes).unwrap()).unwrap() == r.corpus;

    let mut rng = RngState::new(55);
    let mut identity = 0;
    let sequences = 20;
    for _ in 0..sequences {
        let mut m = r.base.clone();
        for _ in 0..1 + rng.below(8) {
            let pick = rng.below(5) as usize;
            let step = (pick < 4).then(|| Emotion::EMOTIONAL[pick]);
            swap(&mut m, &mut reg, step).unwrap();
        }
        swap(&mut m, &mut reg, None).unwrap();
        if test_outputs(&m) == pristine {
            identity += 1;
        }
    }
    outcome(
        identity == sequences && round_trips == 4 && corpus_ok,
        format!("{identity}/{sequences} swap sequences restore the base, {round_trips}/4 bundles round-trip"),
    )
}

fn oracle_soundness() -> Outcome {
    let r = reference();
    let mut hits = 0;
    let mut total = 0;
    for u in &r.corpus.utterances {
        for e in Emotion::ALL {
            let t = apply_emotion(&r.base, &u.tokens, &u.neutral().frames, e).unwrap();
            total += 1;
            if classify(&t.frames, &t.output, u) == e {
                hits += 1;
            }
        }
    }
    outcome(
        hits == total && r.corpus.len() == 200,
        format!("{hits}/{total} over {} utterances", r.corpus.len()),
    )
}

fn column(rows: &[loralab::trainer::RunReport], scheme: &str) -> f64 {
    rows.iter().find(|r| r.scheme == scheme).expect("scheme column").match_rate
}

fn scheme_ordering() -> Outcome {
    let sweeps = scheme_sweeps();
    let mut per_emotion = true;
    let (mut g, mut a, mut e) = (0.0, 0.0, 0.0);
    for (_, rows) in sweeps {
        per_emotion &= column(rows, "g") >= column(rows, "a");
        g += column(rows, "g");
        a += column(rows, "a");
        e += column(rows, "e");
    }
    let n = sweeps.len() as f64;
    let (g, a, e) = (g / n, a / n, e / n);
    outcome(
        per_emotion && g >= a.max(e) + 0.05,
        format!("mean match rate g {g:.3}, a {a:.3}, e {e:.3}; g >= a for every emotion: {per_emotion}"),
    )
}

fn rank_insensitivity() -> Outcome {
    let mut worst = 0.0f64;
    for (_, rows) in rank_sweeps() {
        let hi = rows.iter().map(|r| r.match_rate).fold(f64::MIN, f64::max);
        let lo = rows.iter().map(|r| r.match_rate).fold(f64::MAX, f64::min);
        worst = worst.max(hi - lo);
    }
    outcome(worst <= 0.05, format!("largest spread over r=2,4,8,16 is {:.1} points", 100.0 * worst))
}

fn finetune_ordering() -> Outcome {
    let rows = comparison();
    let ok = rows.iter().all(|c| c.fine_tune.match_rate >= c.g.match_rate);
    let detail: Vec<String> = rows
        .iter()
        .map(|c| format!("{} {:.2}>={:.2}", c.emotion, c.fine_tune.match_rate, c.g.match_rate))
        .collect();
    outcome(ok, format!("fine-tune >= g(r={COMPARE_RANK}): {}", detail.join(", ")))
}

fn param_ratio() -> Outcome {
    let r = reference();
    let full = r.base.full_param_count();
    let g = comparison()[0].g.param_count;
    let mut m = r.base.clone();
    apply(&mut m, Scheme::G, COMPARE_RANK, COMPARE_RANK as f32, &mut RngState::new(0)).unwrap();
    let closed_form = trainable_param_count(&m);
    let ratio = g as f64 / full as f64;
    outcome(
        g == closed_form && ratio <= 0.05,
        format!("g(r={COMPARE_RANK}) {g} of {full} parameters = {:.1}% (limit 5%)", 100.0 * ratio),
    )
}

fn plug_and_play() -> Outcome {
    let r = reference();
    let mut reg = AdapterRegistry::new();
    for (b, _) in g_bundles() {
        reg.insert(b.clone());
    }
    let mut m = r.base.clone();
    let mut rates = Vec::new();
    for e in Emotion::EMOTIONAL {
        swap(&mut m, &mut reg, Some(e)).unwrap();
        let labels = test_labels(&m, &r.corpus).unwrap();
        rates.push((e, labels.iter().filter(|&&l| l == e).count() as f64 / labels.len() as f64));
    }
    swap(&mut m, &mut reg, None).unwrap();
    let ok = rates.iter().all(|&(_, x)| x >= 0.9);
    let detail: Vec<String> = rates.iter().map(|(e, x)| format!("{e} {x:.2}")).collect();
    outcome(ok, format!("g(r={SWEEP_RANK}) own-emotion match rate: {}", detail.join(", ")))
}

fn flow_error(m: &ToyModel) -> f32 {
    let r = reference();
    let mut worst = 0.0f32;
    let mut rng = RngState::new(9);
    let hidden = m.config().hidden;
    let mut inputs: Vec<Tensor> = r
        .corpus
        .test()
        .map(|u| m.forward(&u.tokens, Mode::Deterministic).unwrap().mu)
        .collect();
    for rows in [1, 7, 48] {
        inputs.push(layercheck::uniform(&mut rng, &[rows, hidden]).map(|v| 3.0 * v));
    }
    for z in inputs {
        let back = m.flow.inverse(&m.flow.forward(&z).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&z).unwrap());
    }
    worst
}

fn flow_invertibility() -> Outcome {
    let r = reference();
    let mut variants = vec![("base".to_string(), r.base.clone())];
    for (b, _) in g_bundles() {
        let mut m = r.base.clone();
        b.attach_to(&mut m).unwrap();
        variants.push((format!("{} g", b.emotion), m.clone()));
        for (_, _, d) in m.layers_mut() {
            if d.is_adapted() {
                d.merge().unwrap();
            }
        }
        variants.push((format!("{} g merged", b.emotion), m));
    }
    for c in comparison() {
        variants.push((format!("{} fine-tuned", c.emotion), c.fine_tuned.clone()));
    }
    let worst = variants.iter().map(|(_, m)| flow_error(m)).fold(0.0f32, f32::max);
    outcome(worst <= 1e-5, format!("{} models, max round-trip error {worst:.3e}", variants.len()))
}

fn print_table(title: &str, table: &Table) {
    println!("\n{title}\n{}", table.to_aligned());
}

fn main() -> ExitCode {
    let started = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("1 zero-init identity", zero_init_identity),
        ("2 merge equivalence", merge_equivalence),
        ("3 gradient correctness", gradient_correctness),
        ("4 frozen-base invariance", frozen_base),
        ("5 hot-swap soundness", hot_swap),
        ("6 oracle soundness", oracle_soundness),
        ("7 scheme ordering", scheme_ordering),
        ("8 rank insensitivity", rank_insensitivity),
        ("9 fine-tune ordering", finetune_ordering),
        ("9 parameter ratio", param_ratio),
        ("10 plug-and-play", plug_and_play),
        ("11 flow invertibility", flow_invertibility),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!("{verdict} criterion {name}: {} ({:.1}s)", result.detail, t.elapsed().as_secs_f64());
    }

    let sweeps = scheme_sweeps();
    print_table(&format!("match rate by scheme (r={SWEEP_RANK})"), &scheme_table(sweeps));
    print_table("match rate of scheme g by rank", &rank_table(rank_sweeps()));
    let rows: Vec<_> = comparison()
        .iter()
        .map(|c| (c.emotion, c.g.clone(), c.fine_tune.clone()))
        .collect();
    print_table(&format!("scheme g (r={COMPARE_RANK}) against full fine-tuning"), &comparison_table(&rows));
    let full = reference().base.full_param_count();
    println!("trainable parameters, full fine-tuning {full}");
    for (_, rows) in rank_sweeps().iter().take(1) {
        for rep in rows {
            println!(
                "  g r={:<2} {:>5} ({:.1}%)",
                rep.rank.unwrap_or(0),
                rep.param_count,
                100.0 * rep.param_count as f64 / full as f64
            );
        }
    }
    println!(
        "\n{} of 12 checks passed in {:.0}s",
        12 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
