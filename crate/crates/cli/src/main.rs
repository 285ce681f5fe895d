//! `loralab` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 training
//! failure, 4 incompatible or corrupt artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use loralab::adapterio::{
    load_base, load_corpus, save_base, save_corpus, swap, tensors_to_container, AdapterBundle, AdapterRegistry,
};
use loralab::config::ExperimentConfig;
use loralab::emodata::{gen_corpus, label_counts, test_labels, Emotion, EmotionCorpus};
use loralab::model::{Mode, ToyModel};
use loralab::numkern::Tensor;
use loralab::schemes::Scheme;
use loralab::trainer::{
    build_base, comparison_table, fine_tune_full, loss_curve_table, rank_sweep, rank_table, reports_table,
    scheme_sweep, scheme_table, train_adapter, RunReport, Table, DEFAULT_RANKS,
};
use loralab::Error;

#[derive(Parser, Debug)]
#[command(name = "loralab", version, about = "Low-rank adapter placement experiments on a toy synthesizer")]
struct Cli {
    /// Worker threads for sweep cells. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the neutral base and generate the emotional corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the student initialization seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one adapter bundle for one emotion.
    TrainAdapter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        emotion: String,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Rank or scheme sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: SweepMode,
        /// Emotion to sweep; all four when omitted.
        #[arg(long)]
        emotion: Option<String>,
        /// Scheme for the rank sweep.
        #[arg(long, default_value = "g")]
        scheme: String,
        /// Ranks for the rank sweep.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RANKS)]
        ranks: Vec<usize>,
        /// Rank for the scheme sweep.
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Scheme g against full fine-tuning for all four emotions.
    CompareFinetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        rank: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Synthesize one token sequence, optionally with an adapter attached.
    Synth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Comma-separated token ids.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match rates on the test split of a corpus.
    Eval {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Repeat a recorded run.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the recorded one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    base: PathBuf,
    /// Defaults to `corpus.eela` next to the base checkpoint.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SweepMode {
    Rank,
    Scheme,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Input(_) | Error::Lookup { .. } | Error::Io(_) => 2,
            Error::Training { .. } | Error::Numeric(_) => 3,
            Error::Compatibility(_) | Error::Format(_) | Error::State(_) | Error::Shape(_) => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

fn io_context(path: &Path, e: std::io::Error) -> Failure {
    usage(format!("{}: {e}", path.display()))
}

fn artifact(path: &Path, e: Error) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

fn load_config(path: Option<&Path>, snapshot: Option<&ExperimentConfig>) -> CmdResult<ExperimentConfig> {
    if let Some(cfg) = snapshot {
        return Ok(cfg.clone());
    }
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_context(p, e))?;
            ExperimentConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_scheme(s: &str) -> CmdResult<Scheme> {
    s.parse::<Scheme>().map_err(Failure::from)
}

fn parse_emotion(s: &str) -> CmdResult<Emotion> {
    let e: Emotion = s.parse()?;
    if e == Emotion::Neutral {
        return Err(usage("adapters are trained for angry, happy, sad or surprise, not neutral"));
    }
    Ok(e)
}

fn open_base(path: &Path) -> CmdResult<ToyModel> {
    if !path.exists() {
        return Err(usage(format!("{}: base checkpoint not found", path.display())));
    }
    let base = load_base(path).map_err(|e| artifact(path, e))?;
    if !base.is_pretrained() {
        return Err(Failure {
            code: 4,
            message: format!("{}: checkpoint is not a pretrained base", path.display()),
        });
    }
    Ok(base)
}

fn open_corpus(path: &Path, base: &ToyModel) -> CmdResult<EmotionCorpus> {
    if !path.exists() {
        return Err(usage(format!("{}: corpus not found", path.display())));
    }
    let corpus = load_corpus(path).map_err(|e| artifact(path, e))?;
    if corpus.base_checksum != base.base_checksum() {
        return Err(Failure {
            code: 4,
            message: format!(
                "{}: corpus was generated by base {:08x}, checkpoint is {:08x}",
                path.display(),
                corpus.base_checksum,
                base.base_checksum()
            ),
        });
    }
    Ok(corpus)
}

fn open_bundle(path: &Path) -> CmdResult<AdapterBundle> {
    if !path.exists() {
        return Err(usage(format!("{}: adapter not found", path.display())));
    }
    AdapterBundle::load(path).map_err(|e| artifact(path, e))
}

fn corpus_path(common: &Common) -> PathBuf {
    common.corpus.clone().unwrap_or_else(|| {
        common
            .base
            .parent()
            .map_or_else(|| PathBuf::from("corpus.eela"), |d| d.join("corpus.eela"))
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| io_context(path, e))
}

fn write_table(dir: &Path, stem: &str, table: &Table) -> CmdResult {
    write(&dir.join(format!("{stem}.csv")), table.to_csv())?;
    write(&dir.join(format!("{stem}.txt")), table.to_aligned())
}

fn make_out_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| io_context(dir, e))
}

/// What a rerun needs: the command line and the resolved configuration.
struct Manifest {
    command: String,
    config_path: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
    args: Vec<String>,
    config: ExperimentConfig,
}

const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_MARKER: &str = "[config]";

impl Manifest {
    fn render(&self) -> String {
        let mut s = String::from("# loralab run manifest\n");
        s.push_str(&format!("command = {}\n", self.command));
        let cfg_path = self
            .config_path
            .as_ref()
            .map_or_else(|| "-".to_string(), |p| p.display().to_string());
        s.push_str(&format!("config_path = {cfg_path}\n"));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("out = {}\n", self.out.display()));
        for a in &self.args {
            s.push_str(&format!("arg = {a}\n"));
        }
        s.push_str(CONFIG_MARKER);
        s.push('\n');
        s.push_str(&self.config.to_text());
        s
    }

    fn parse(text: &str) -> CmdResult<Self> {
        let (head, cfg_text) = text
            .split_once(&format!("{CONFIG_MARKER}\n"))
            .ok_or_else(|| usage("manifest lacks a [config] section"))?;
        let config = ExperimentConfig::parse(cfg_text).map_err(|e| usage(format!("manifest config: {e}")))?;
        let mut m = Manifest {
            command: String::new(),
            config_path: None,
            seed: 0,
            out: PathBuf::new(),
            args: Vec::new(),
            config,
        };
        for line in head.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| usage(format!("bad manifest line {line:?}")))?;
            match k {
                "command" => m.command = v.to_string(),
                "config_path" => m.config_path = (v != "-").then(|| PathBuf::from(v)),
                "seed" => m.seed = v.parse().map_err(|_| usage(format!("bad manifest seed {v:?}")))?,
                "out" => m.out = PathBuf::from(v),
                "arg" => m.args.push(v.to_string()),
                _ => return Err(usage(format!("unknown manifest key {k}"))),
            }
        }
        if m.args.is_empty() {
            return Err(usage("manifest records no command line"));
        }
        Ok(m)
    }
}

fn record_manifest(
    argv: &[String],
    command: &str,
    config_path: Option<&Path>,
    out: &Path,
    config: &ExperimentConfig,
) -> CmdResult {
    make_out_dir(out)?;
    let m = Manifest {
        command: command.to_string(),
        config_path: config_path.map(Path::to_path_buf),
        seed: config.seed,
        out: out.to_path_buf(),
        args: argv.to_vec(),
        config: config.clone(),
    };
    write(&out.join(MANIFEST_FILE), m.render())
}

struct Ctx {
    /// Command line without the program name, recorded in manifests.
    argv: Vec<String>,
    snapshot: Option<ExperimentConfig>,
}

fn cmd_pretrain(ctx: &Ctx, config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg = load_config(config, ctx.snapshot.as_ref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    record_manifest(&ctx.argv, "pretrain", config, out, &cfg)?;
    eprintln!("pretraining for {} steps", cfg.pretrain.steps);
    let (base, losses) = build_base(&cfg.pretrain_setup())?;
    let corpus = gen_corpus(&base, &cfg.corpus)?;
    save_base(&base, out.join("base.eela"))?;
    save_corpus(&corpus, out.join("corpus.eela"))?;
    write(&out.join("pretrain_loss.csv"), loss_curve_table(&losses).to_csv())?;
    println!(
        "base {:08x}: loss {:.6} -> {:.6}, corpus {} utterances ({} test)",
        base.base_checksum(),
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN),
        corpus.len(),
        corpus.test().count()
    );
    Ok(())
}

fn adapt_config(ctx: &Ctx, common: &Common, steps: Option<usize>, rank: Option<usize>) -> CmdResult<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref(), ctx.snapshot.as_ref())?;
    if let Some(s) = steps {
        cfg.adapt.steps = s;
    }
    if let Some(r) = rank {
        cfg.rank = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train_adapter(
    ctx: &Ctx,
    common: &Common,
    scheme: &str,
    emotion: &str,
    rank: Option<usize>,
    alpha: Option<f32>,
    steps: Option<usize>,
) -> CmdResult {
    let scheme = parse_scheme(scheme)?;
    let emotion = parse_emotion(emotion)?;
    let mut cfg = adapt_config(ctx, common, steps, rank)?;
    if alpha.is_some() {
        cfg.alpha = alpha;
    }
    cfg.validate()?;
    let base = open_base(&common.base)?;
    let corpus = open_corpus(&corpus_path(common), &base)?;
    record_manifest(&ctx.argv, "train-adapter", common.config.as_deref(), &common.out, &cfg)?;
    let (bundle, report) = train_adapter(&base, scheme, emotion, &corpus, cfg.rank, cfg.alpha, &cfg.adapt)?;
    bundle.save(common.out.join(format!("{emotion}.eela")))?;
    write(&common.out.join("report.csv"), reports_table(&[report.clone()]).to_csv())?;
    println!(
        "{emotion} scheme {scheme} r={}: match_rate {} params {} loss {:.6}",
        cfg.rank, report.match_rate, report.param_count, report.final_loss
    );
    Ok(())
}

fn sweep_emotions(emotion: Option<&str>) -> CmdResult<Vec<Emotion>> {
    match emotion {
        None | Some("all") => Ok(Emotion::EMOTIONAL.to_vec()),
        Some(e) => Ok(vec![parse_emotion(e)?]),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    ctx: &Ctx,
    common: &Common,
    mode: SweepMode,
    emotion: Option<&str>,
    scheme: &str,
    ranks: &[usize],
    rank: Option<usize>,
    steps: Option<usize>,
) -> CmdResult {
    let emotions = sweep_emotions(emotion)?;
    let scheme = parse_scheme(scheme)?;
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(usage("ranks must be positive"));
    }
    let cfg = adapt_config(ctx, common, steps, rank)?;
    let base = open_base(&common.base)?;
    let corpus = open_corpus(&corpus_path(common), &base)?;
    record_manifest(&ctx.argv, "sweep", common.config.as_deref(), &common.out, &cfg)?;
    let mut sweeps: Vec<(Emotion, Vec<RunReport>)> = Vec::new();
    for e in emotions {
        eprintln!("sweeping {e}");
        let rows = match mode {
            SweepMode::Rank => rank_sweep(&base, scheme, e, &corpus, ranks, &cfg.adapt)?,
            SweepMode::Scheme => scheme_sweep(&base, &Scheme::ALL, e, &corpus, cfg.rank, &cfg.adapt)?,
        };
        sweeps.push((e, rows));
    }
    let (stem, table) = match mode {
        SweepMode::Rank => ("rank_table", rank_table(&sweeps)),
        SweepMode::Scheme => ("scheme_table", scheme_table(&sweeps)),
    };
    write_table(&common.out, stem, &table)?;
    let all: Vec<RunReport> = sweeps.into_iter().flat_map(|(_, r)| r).collect();
    write(&common.out.join("runs.csv"), reports_table(&all).to_csv())?;
    print!("{}", table.to_aligned());
    Ok(())
}

fn cmd_compare(ctx: &Ctx, common: &Common, rank: usize, steps: Option<usize>) -> CmdResult {
    let cfg = adapt_config(ctx, common, steps, Some(rank))?;
    let base = open_base(&common.base)?;
    let corpus = open_corpus(&corpus_path(common), &base)?;
    record_manifest(&ctx.argv, "compare-finetune", common.config.as_deref(), &common.out, &cfg)?;
    let mut rows = Vec::new();
    for e in Emotion::EMOTIONAL {
        eprintln!("comparing {e}");
        let (_, g) = train_adapter(&base, Scheme::G, e, &corpus, cfg.rank, cfg.alpha, &cfg.adapt)?;
        let (_, ft) = fine_tune_full(&base, e, &corpus, &cfg.adapt)?;
        rows.push((e, g, ft));
    }
    let table = comparison_table(&rows);
    write_table(&common.out, "comparison", &table)?;
    let all: Vec<RunReport> = rows.into_iter().flat_map(|(_, g, ft)| [g, ft]).collect();
    write(&common.out.join("runs.csv"), reports_table(&all).to_csv())?;
    print!("{}", table.to_aligned());
    Ok(())
}

fn attach_bundle(base: &mut ToyModel, bundle: AdapterBundle) -> CmdResult<Emotion> {
    let mut reg = AdapterRegistry::new();
    let e = bundle.emotion;
    reg.insert(bundle);
    swap(base, &mut reg, Some(e))?;
    Ok(e)
}

fn cmd_synth(base: &Path, adapter: Option<&Path>, tokens: &[usize], out: &Path) -> CmdResult {
    let mut model = open_base(base)?;
    if let Some(p) = adapter {
        let bundle = open_bundle(p)?;
        attach_bundle(&mut model, bundle).map_err(|mut f| {
            f.message = format!("{}: {}", p.display(), f.message);
            f
        })?;
    }
    let s = model.forward(tokens, Mode::Deterministic)?;
    let row = |v: Vec<f32>| Tensor::new(&[1, v.len()], v);
    let tensors = vec![
        ("durations".to_string(), row(s.durations.clone())?),
        ("frames".to_string(), row(s.frames.iter().map(|&f| f as f32).collect())?),
        ("mu".to_string(), s.mu.clone()),
        ("logvar".to_string(), s.logvar.clone()),
        ("acoustic".to_string(), s.acoustic.clone()),
        ("output".to_string(), s.output.clone()),
    ];
    tensors_to_container("synth", &tensors).save(out)?;
    println!("{} tokens -> {} frames", tokens.len(), s.total_frames());
    Ok(())
}

fn cmd_eval(base: &Path, adapters: &[PathBuf], corpus: &Path) -> CmdResult {
    let mut model = open_base(base)?;
    let corpus = open_corpus(corpus, &model)?;
    if adapters.is_empty() {
        let labels = test_labels(&model, &corpus)?;
        let counts = label_counts(&labels);
        println!("neutral {}", counts[Emotion::Neutral.index()] as f64 / labels.len() as f64);
        return Ok(());
    }
    let mut reg = AdapterRegistry::new();
    let mut order = Vec::new();
    for p in adapters {
        let b = open_bundle(p)?;
        b.check_compatible(&model).map_err(|e| artifact(p, e))?;
        order.push(b.emotion);
        reg.insert(b);
    }
    for e in order {
        swap(&mut model, &mut reg, Some(e))?;
        let labels = test_labels(&model, &corpus)?;
        let rate = labels.iter().filter(|&&l| l == e).count() as f64 / labels.len() as f64;
        println!("{e} {rate}");
    }
    swap(&mut model, &mut reg, None)?;
    Ok(())
}

fn cmd_rerun(manifest: &Path, out: Option<&Path>) -> CmdResult {
    let text = fs::read_to_string(manifest).map_err(|e| io_context(manifest, e))?;
    let m = Manifest::parse(&text)?;
    let mut args = m.args.clone();
    if let Some(new_out) = out {
        let pos = args
            .iter()
            .position(|a| a == "--out")
            .ok_or_else(|| usage("recorded command has no --out"))?;
        args[pos + 1] = new_out.display().to_string();
    }
    let cli = Cli::try_parse_from(std::iter::once("loralab".to_string()).chain(args.iter().cloned()))
        .map_err(|e| usage(format!("recorded command line no longer parses: {e}")))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(usage("a manifest cannot record a rerun"));
    }
    let ctx = Ctx {
        argv: args,
        snapshot: Some(m.config),
    };
    dispatch(&ctx, cli.command)
}

fn dispatch(ctx: &Ctx, command: Command) -> CmdResult {
    match command {
        Command::Pretrain { config, out, seed } => cmd_pretrain(ctx, config.as_deref(), &out, seed),
        Command::TrainAdapter {
            common,
            scheme,
            emotion,
            rank,
            alpha,
            steps,
        } => cmd_train_adapter(ctx, &common, &scheme, &emotion, rank, alpha, steps),
        Command::Sweep {
            common,
            mode,
            emotion,
            scheme,
            ranks,
            rank,
            steps,
        } => cmd_sweep(ctx, &common, mode, emotion.as_deref(), &scheme, &ranks, rank, steps),
        Command::CompareFinetune { common, rank, steps } => cmd_compare(ctx, &common, rank, steps),
        Command::Synth {
            base,
            adapter,
            tokens,
            out,
        } => cmd_synth(&base, adapter.as_deref(), &tokens, &out),
        Command::Eval { base, adapter, corpus } => cmd_eval(&base, &adapter, &corpus),
        Command::Rerun { manifest, out } => cmd_rerun(&manifest, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    let ctx = Ctx {
        argv: std::env::args().skip(1).collect(),
        snapshot: None,
    };
    match dispatch(&ctx, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
