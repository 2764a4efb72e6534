use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mtlink::config::TrainConfig;
use mtlink::data::io::{read_checkins, read_identity_map};
use mtlink::data::{preprocess, Corpus, PairSample, PreprocessConfig};
use mtlink::eval::{cooccurrence_matrix, export_heatmaps};
use mtlink::layers::Session;
use mtlink::masking::write_plan_jsonl;
use mtlink::synth::{self, SynthConfig};
use mtlink::training::{eval_plan_seed, evaluate, train, Checkpoint, PairSet};
use mtlink::{gradcheck, Error, Result};

const EXIT_CODES: &str = "\
Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Settings resolve in order: built-in defaults, then --config FILE, then --set KEY=VALUE, then dedicated flags.";

#[derive(Parser)]
#[command(name = "mtlink", version, about = "Cross-platform user identity linkage from check-in sequences", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic check-ins for two platforms and their identity map.
    Generate(GenerateArgs),
    /// Tokenize check-ins and sample labeled train/val/test pairs.
    Preprocess(PreprocessArgs),
    /// Train a model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Print a checkpoint's stored validation metrics, optionally scoring a split.
    Evaluate(EvaluateArgs),
    /// Export one pair's attention maps and co-occurrence matrix.
    ExportAttention(ExportArgs),
    /// Compare backprop gradients of a small model with finite differences.
    Gradcheck(GradcheckArgs),
}

/// A `key = value` file plus individual overrides.
#[derive(Args)]
struct Settings {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Settings {
    /// Every `(key, value)` to apply, in precedence order.
    fn resolve(&self, flags: Vec<(&str, Option<String>)>) -> Result<Vec<(String, String)>> {
        let mut out = match &self.config {
            Some(path) => mtlink::config::parse_lines(&fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("--set {kv:?}: expected KEY=VALUE")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        out.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
        Ok(out)
    }
}

fn flag<T: ToString>(key: &str, v: Option<T>) -> (&str, Option<String>) {
    (key, v.map(|x| x.to_string()))
}

fn switch(key: &str, on: bool) -> (&str, Option<String>) {
    (key, on.then(|| "true".to_string()))
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for checkins_a.csv, checkins_b.csv and identity_map.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    cooccur_fraction: Option<f64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    jitter_secs: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Check-in file (CSV, or JSON lines for .jsonl); repeatable.
    #[arg(long, required = true)]
    checkins: Vec<PathBuf>,
    #[arg(long)]
    identity_map: PathBuf,
    /// Output corpus (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    neg_ratio: Option<usize>,
    #[arg(long)]
    cell_size_deg: Option<f64>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus written by `preprocess`.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also write one JSON line per epoch here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    disable_mte: bool,
    #[arg(long)]
    disable_cab: bool,
    #[arg(long)]
    disable_tte: bool,
    #[command(flatten)]
    settings: Settings,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score this corpus's split in addition to reprinting stored metrics.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Index of the pair within the split.
    #[arg(long)]
    pair_id: usize,
    #[arg(long)]
    out: PathBuf,
    /// Append the pair's mask plans as JSON lines to this file.
    #[arg(long)]
    mask_plans: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Gradcheck passes below this relative error.
const GRADCHECK_TOL: f64 = 1e-4;

fn split<'c>(corpus: &'c Corpus, name: &str) -> Result<&'c [PairSample]> {
    match name {
        "train" => Ok(&corpus.splits.train),
        "val" => Ok(&corpus.splits.val),
        "test" => Ok(&corpus.splits.test),
        other => Err(Error::Validation(format!(
            "unknown split {other:?}; expected train, val or test"
        ))),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    for (k, v) in args.settings.resolve(vec![
        flag("n_users", args.n_users),
        flag("cooccur_fraction", args.cooccur_fraction),
        flag("noise_rate", args.noise_rate),
        flag("jitter_secs", args.jitter_secs),
        flag("seed", args.seed),
    ])? {
        cfg.set(&k, &v)?;
    }
    let data = synth::generate(&cfg)?;
    let files = synth::write(&data, &args.out)?;
    println!("users {}  check-ins {}", data.links.len(), data.points.len());
    for p in [files.checkins_a, files.checkins_b, files.identity_map] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_preprocess(args: PreprocessArgs) -> Result<()> {
    let mut cfg = PreprocessConfig::default();
    for (k, v) in args.settings.resolve(vec![
        flag("neg_ratio", args.neg_ratio),
        flag("cell_size_deg", args.cell_size_deg),
        flag("min_len", args.min_len),
        flag("seed", args.seed),
    ])? {
        cfg.set(&k, &v)?;
    }
    let mut points = Vec::new();
    for path in &args.checkins {
        points.extend(read_checkins(path)?);
    }
    let links = read_identity_map(&args.identity_map)?;
    let corpus = preprocess(&points, &links, &cfg)?;
    corpus.save(&args.out)?;
    let s = &corpus.splits;
    println!(
        "sequences A {}  B {}  vocabulary {}  pairs train {}  val {}  test {}",
        corpus.seqs_a.len(),
        corpus.seqs_b.len(),
        corpus.vocab.len(),
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    for (k, v) in args.settings.resolve(vec![
        flag("d", args.d),
        flag("heads", args.heads),
        flag("mask_ratio", args.mask_ratio),
        flag("dropout", args.dropout),
        flag("learning_rate", args.lr),
        flag("batch_size", args.batch_size),
        flag("max_epochs", args.max_epochs),
        flag("patience", args.patience),
        flag("seed", args.seed),
        switch("disable_mte", args.disable_mte),
        switch("disable_cab", args.disable_cab),
        switch("disable_tte", args.disable_tte),
    ])? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    let corpus = Corpus::load(&args.corpus)?;
    let mut log = match &args.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut log_err = None;
    let outcome = train(
        &PairSet::of(&corpus, &corpus.splits.train),
        &PairSet::of(&corpus, &corpus.splits.val),
        corpus.vocab.len(),
        &cfg,
        |e| {
            println!(
                "epoch {:>3}  loss {:.5}  val_auc {:.4}  val_f1 {:.4}  {:.1}s{}",
                e.epoch,
                e.train_loss,
                e.val.auc.unwrap_or(f64::NAN),
                e.val.macro_f1,
                e.seconds,
                if e.improved { "  *" } else { "" }
            );
            if let Some(w) = log.as_mut() {
                let line = serde_json::json!({
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val": e.val,
                    "improved": e.improved,
                });
                if let Err(err) = writeln!(w, "{line}") {
                    log_err.get_or_insert(err);
                }
            }
            ControlFlow::Continue(())
        },
    )?;
    if let Some(err) = log_err {
        return Err(err.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    let ck = &outcome.checkpoint;
    ck.save(&args.out)?;
    println!(
        "best epoch {} of {}{}  val_auc {:.4}",
        ck.epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        ck.best_metric
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let stored = ck.val_metrics.as_ref().map(serde_json::to_string).transpose()?;
    println!("stored validation {}", stored.as_deref().unwrap_or("null"));
    if let Some(path) = &args.corpus {
        let corpus = Corpus::load(path)?;
        let pairs = split(&corpus, &args.split)?;
        let metrics = evaluate(&ck.model()?, &ck.params, &PairSet::of(&corpus, pairs), ck.config.seed)?;
        println!("{} {}", args.split, serde_json::to_string(&metrics)?);
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let corpus = Corpus::load(&args.corpus)?;
    let pairs = split(&corpus, &args.split)?;
    let pair = pairs.get(args.pair_id).ok_or_else(|| {
        Error::Validation(format!(
            "pair {} is outside the {} split of {} pairs",
            args.pair_id,
            args.split,
            pairs.len()
        ))
    })?;
    let model = ck.model()?;
    let (a, b) = corpus.pair(pair);
    let mut s = Session::eval(&ck.params);
    let out = model.forward_pair(&mut s, a, b, eval_plan_seed(ck.config.seed, args.pair_id))?;
    let prob = s.value(out.prob).item()?;
    let (Some(map_ab), Some(map_ba)) = (&out.map_ab, &out.map_ba) else {
        return Err(Error::Validation(
            "this checkpoint has no cross-attention maps (disable_cab)".into(),
        ));
    };
    let cooc = cooccurrence_matrix(a.coords.as_deref(), b.coords.as_deref())?;
    let files = export_heatmaps(map_ab, map_ba, &cooc, &args.out)?;
    if let Some(path) = &args.mask_plans {
        let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
        for plan in [&out.plan_a, &out.plan_b].into_iter().flatten() {
            write_plan_jsonl(&mut w, args.pair_id, plan)?;
        }
        w.flush()?;
    }
    println!("pair {}  label {}  probability {:.6}", args.pair_id, pair.label, prob);
    for p in [&files.map_ab, &files.map_ba, &files.cooccurrence, &files.image] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<bool> {
    let start = Instant::now();
    let report = gradcheck::run(args.d, args.k, args.seed)?;
    println!(
        "max relative error {:.3e}  worst {}  scalars {}  {:.1}s",
        report.max_rel_err,
        report.worst,
        report.n_checked,
        start.elapsed().as_secs_f64()
    );
    let pass = report.max_rel_err < GRADCHECK_TOL;
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn exists_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.exists() => {
            Err(Error::Validation(format!("directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Generate(a) => generate(a)?,
        Command::Preprocess(a) => {
            exists_parent(&a.out)?;
            run_preprocess(a)?
        }
        Command::Train(a) => {
            exists_parent(&a.out)?;
            run_train(a)?
        }
        Command::Evaluate(a) => run_evaluate(a)?,
        Command::ExportAttention(a) => run_export(a)?,
        Command::Gradcheck(a) => return run_gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
