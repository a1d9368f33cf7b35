//! Command-line front end. Exit codes: 0 success, 1 invalid input or usage,
//! 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use motionloc::cmr::{dcg_summary, rank_corpus, CmrConfig, CmrError, Localizer, PlantedPrimitives};
use motionloc::data::synth::{generate_synthetic_dataset, GeneratorConfig};
use motionloc::data::{load_dataset, save_dataset, DataError, Dataset, Split};
use motionloc::eval::{evaluate_split, EvalConfig, EvalError, TokenJaccard};
use motionloc::train::{load_network, train, Checkpoint, TrainConfig, TrainError, TrainOptions};
use motionloc::verify::{run_gradient_suite, SuiteConfig};

#[derive(Debug, Parser)]
#[command(name = "motionloc", version, about = "Temporal sentence localization in 3D human motion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON file overriding the default configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Dataset file (NDJSON)
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Print machine-readable JSON
    #[arg(long, global = true)]
    json: bool,
    /// Start from the full-size configuration instead of the desk one
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Normal,
    Assigned,
    Both,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark into --dataset
    Gen {
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train on --dataset, writing checkpoints and metrics to --out-dir
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a split of --dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "both")]
        protocol: ProtocolArg,
        /// Similarity above which sibling queries count as false negatives
        #[arg(long, default_value_t = 0.8)]
        similarity_threshold: f64,
    },
    /// Localize one query
    Locate {
        #[arg(long)]
        model: PathBuf,
        /// Index of a sample in --dataset
        #[arg(long, required_unless_present = "query")]
        query_id: Option<usize>,
        /// Free-text query, used with --motion-id
        #[arg(long, requires = "motion_id")]
        query: Option<String>,
        #[arg(long)]
        motion_id: Option<String>,
    },
    /// Rank moments across a motion corpus
    Cmr {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 5.0)]
        lambda: f64,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        /// Index of a corpus sample whose text is the query
        #[arg(long, required_unless_present = "query")]
        query_id: Option<usize>,
        #[arg(long)]
        query: Option<String>,
    },
    /// Finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
    /// Summary statistics of --dataset
    Stats,
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Runtime(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Checkpoint(_) => CliError::Invalid(e.to_string()),
            TrainError::Data(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<CmrError> for CliError {
    fn from(e: CmrError) -> Self {
        match e {
            CmrError::Config(_) | CmrError::Cutoff | CmrError::EmptyCorpus => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Gen { train, val, test } => gen(c, *train, *val, *test, out),
        Cmd::Train {
            epochs,
            resume,
            stop_after,
        } => run_train(c, *epochs, resume.as_deref(), *stop_after, out),
        Cmd::Eval {
            model,
            split,
            protocol,
            similarity_threshold,
        } => run_eval(c, model, split, *protocol, *similarity_threshold, out),
        Cmd::Locate {
            model,
            query_id,
            query,
            motion_id,
        } => locate(c, model, *query_id, query.as_deref(), motion_id.as_deref(), out),
        Cmd::Cmr {
            corpus,
            model,
            k,
            lambda,
            top_n,
            query_id,
            query,
        } => run_cmr(c, corpus, model, (*k, *lambda, *top_n), *query_id, query.as_deref(), out),
        Cmd::Gradcheck { cases } => gradcheck(c, *cases, out),
        Cmd::Stats => stats(c, out),
    }
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    v.as_deref().ok_or_else(|| CliError::Invalid(format!("missing required flag {flag}")))
}

/// Applies the keys of a JSON config file on top of `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = file else { return Ok(base) };
    let text = std::fs::read_to_string(path)?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let Value::Object(patch) = patch else {
        return Err(CliError::Invalid(format!("{}: expected a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(base).expect("config serializes");
    let obj = merged.as_object_mut().expect("config is an object");
    for (k, v) in patch {
        if !obj.contains_key(&k) {
            return Err(CliError::Invalid(format!("{}: unknown key {k:?}", path.display())));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn with_path(path: &Path, e: CliError) -> CliError {
    match e {
        CliError::Invalid(m) => CliError::Invalid(format!("{}: {m}", path.display())),
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
    }
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    load_dataset(path).map_err(|e| with_path(path, e.into()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| with_path(path, e.into()))
}

fn emit(out: &mut dyn Write, value: &impl Serialize) -> CliResult {
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("output serializes"))?;
    Ok(())
}

fn gen(c: &Common, train: Option<usize>, val: Option<usize>, test: Option<usize>, out: &mut dyn Write) -> CliResult {
    let path = need(&c.dataset, "--dataset")?;
    let mut cfg = overlay(GeneratorConfig::default(), c.config.as_deref())?;
    cfg.train_samples = train.unwrap_or(cfg.train_samples);
    cfg.val_samples = val.unwrap_or(cfg.val_samples);
    cfg.test_samples = test.unwrap_or(cfg.test_samples);
    let ds = generate_synthetic_dataset(&cfg, c.seed.unwrap_or(0))?;
    save_dataset(&ds, path)?;
    let stats = ds.stats();
    if c.json {
        emit(out, &stats)
    } else {
        writeln!(out, "wrote {} motions, {} queries to {}", ds.motions.len(), ds.samples.len(), path.display())?;
        Ok(())
    }
}

fn train_config(c: &Common, epochs: Option<usize>) -> Result<TrainConfig, CliError> {
    let base = if c.paper_scale { TrainConfig::paper() } else { TrainConfig::desk() };
    let mut cfg = overlay(base, c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(
    c: &Common,
    epochs: Option<usize>,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    out: &mut dyn Write,
) -> CliResult {
    let ds = read_dataset(need(&c.dataset, "--dataset")?)?;
    let out_dir = need(&c.out_dir, "--out-dir")?.to_path_buf();
    let cfg = train_config(c, epochs)?;
    let resume = resume.map(read_checkpoint).transpose()?;
    let started = Instant::now();
    let result = train(
        &ds,
        cfg,
        &TrainOptions {
            out_dir: Some(out_dir.clone()),
            resume,
            stop_after_epoch: stop_after,
        },
    )?;
    let last = result.log.last();
    let summary = json!({
        "epochs": result.checkpoint.epoch,
        "steps": result.checkpoint.step,
        "final_total": last.map(|r| r.total),
        "best_val_mIoU": result.checkpoint.best_val,
        "checkpoint": out_dir.join("last.ckpt"),
        "seconds": started.elapsed().as_secs_f64(),
    });
    if c.json {
        emit(out, &summary)
    } else {
        writeln!(
            out,
            "trained {} epochs ({} steps) in {:.1}s; final loss {}; checkpoint {}",
            result.checkpoint.epoch,
            result.checkpoint.step,
            started.elapsed().as_secs_f64(),
            last.map_or("n/a".to_string(), |r| format!("{:.4}", r.total)),
            out_dir.join("last.ckpt").display()
        )?;
        Ok(())
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse::<Split>().map_err(|e| CliError::Invalid(e.to_string()))
}

fn run_eval(
    c: &Common,
    model: &Path,
    split: &str,
    protocol: ProtocolArg,
    threshold: f64,
    out: &mut dyn Write,
) -> CliResult {
    let split = parse_split(split)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Invalid("--similarity-threshold must lie in [0, 1]".into()));
    }
    let ds = read_dataset(need(&c.dataset, "--dataset")?)?;
    let net = load_network(&read_checkpoint(model)?)?;
    let cfg = EvalConfig {
        similarity_threshold: threshold,
        ..EvalConfig::default()
    };
    if ds.split_indices(split).is_empty() {
        return Err(CliError::Invalid(format!("split {} is empty", split.as_str())));
    }
    let ev = evaluate_split(&net, &ds, split, &cfg, &TokenJaccard)?;
    if let Some(dir) = &c.out_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("eval_{}.json", split.as_str()));
        std::fs::write(path, serde_json::to_string_pretty(&ev).expect("report serializes"))?;
    }
    let reports: Vec<_> = match protocol {
        ProtocolArg::Normal => vec![&ev.normal],
        ProtocolArg::Assigned => vec![&ev.assigned],
        ProtocolArg::Both => vec![&ev.normal, &ev.assigned],
    };
    if c.json {
        return emit(
            out,
            &json!({
                "split": split,
                "reports": reports,
                "highlight_foreground": ev.highlight_foreground,
                "highlight_background": ev.highlight_background,
            }),
        );
    }
    for (i, r) in reports.iter().enumerate() {
        let table = r.table();
        // the header row only once
        let body = if i == 0 { table.as_str() } else { table.split_once('\n').map_or("", |x| x.1) };
        write!(out, "{body}")?;
    }
    writeln!(
        out,
        "highlight mean: foreground {:.3}, background {:.3}",
        ev.highlight_foreground, ev.highlight_background
    )?;
    Ok(())
}

fn locate(
    c: &Common,
    model: &Path,
    query_id: Option<usize>,
    query: Option<&str>,
    motion_id: Option<&str>,
    out: &mut dyn Write,
) -> CliResult {
    let ds = read_dataset(need(&c.dataset, "--dataset")?)?;
    let net = load_network(&read_checkpoint(model)?)?;
    let (motion_id, tokens) = match (query, query_id) {
        (Some(text), _) => (motion_id.expect("clap enforces --motion-id").to_string(), ds.tokenize(text)),
        (None, Some(k)) => {
            let s = ds.samples.get(k).ok_or_else(|| {
                CliError::Invalid(format!("--query-id {k} out of range ({} samples)", ds.samples.len()))
            })?;
            (s.motion_id.clone(), s.token_ids.clone())
        }
        (None, None) => return Err(CliError::Invalid("missing required flag --query-id".into())),
    };
    let motion = ds
        .motion(&motion_id)
        .ok_or_else(|| CliError::Invalid(format!("unknown motion {motion_id:?}")))?;
    let (t_s, t_e, p_se) = net.locate(motion, &tokens)?;
    emit(out, &json!({ "motion_id": motion_id, "t_s": t_s, "t_e": t_e, "p_se": p_se }))
}

fn run_cmr(
    c: &Common,
    corpus: &Path,
    model: &Path,
    (k, lambda, top_n): (usize, f64, usize),
    query_id: Option<usize>,
    query: Option<&str>,
    out: &mut dyn Write,
) -> CliResult {
    let cfg = CmrConfig {
        k,
        lambda,
        ..overlay(CmrConfig::default(), c.config.as_deref())?
    };
    cfg.validate()?;
    if top_n == 0 {
        return Err(CliError::Invalid("--top-n must be at least 1".into()));
    }
    let ds: Dataset = read_dataset(corpus)?;
    let text = match (query, query_id) {
        (Some(t), _) => t.to_string(),
        (None, Some(i)) => ds
            .samples
            .get(i)
            .ok_or_else(|| CliError::Invalid(format!("--query-id {i} out of range ({} samples)", ds.samples.len())))?
            .text
            .clone(),
        (None, None) => return Err(CliError::Invalid("missing required flag --query-id".into())),
    };
    let net = load_network(&read_checkpoint(model)?)?;
    let planted = PlantedPrimitives::from_dataset(&ds);
    let ranked = rank_corpus(&text, &ds, &net, &planted, &planted, &cfg)?;
    let dcg = dcg_summary(&ranked, &cfg.cutoffs)?;
    let shown: Vec<_> = ranked.iter().take(top_n).collect();
    emit(out, &json!({ "query": text, "ranking": shown, "dcg": dcg }))
}

fn gradcheck(c: &Common, cases: usize, out: &mut dyn Write) -> CliResult {
    if cases == 0 {
        return Err(CliError::Invalid("--cases must be at least 1".into()));
    }
    let started = Instant::now();
    let report = run_gradient_suite(&SuiteConfig {
        cases,
        seed: c.seed.unwrap_or(0),
        ..SuiteConfig::default()
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    if c.json {
        emit(out, &report)?;
    } else {
        write!(out, "{}", report.table())?;
        writeln!(
            out,
            "eps {:e}, tolerance {:e}, {:.1}s",
            report.eps,
            report.tol,
            started.elapsed().as_secs_f64()
        )?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn stats(c: &Common, out: &mut dyn Write) -> CliResult {
    let ds = read_dataset(need(&c.dataset, "--dataset")?)?;
    let s = ds.stats();
    if c.json {
        return emit(out, &s);
    }
    writeln!(out, "vocabulary {}", s.vocab_size)?;
    writeln!(
        out,
        "{:<6} {:>8} {:>8} {:>12} {:>12} {:>8}",
        "split", "motions", "queries", "motion (s)", "moment (s)", "words"
    )?;
    for sp in &s.splits {
        writeln!(
            out,
            "{:<6} {:>8} {:>8} {:>12.2} {:>12.2} {:>8.2}",
            sp.split.as_str(),
            sp.motions,
            sp.queries,
            sp.mean_motion_seconds,
            sp.mean_moment_seconds,
            sp.mean_query_words
        )?;
    }
    Ok(())
}
