use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use aesn::checkpoint;
use aesn::config::TrainConfig;
use aesn::data::load_dataset;
use aesn::synextract::SyntaxType;
use aesn::synth::{gen_synth, SynthSpec};
use aesn::train::{self, format_log, LOG_HEADER};

#[derive(Parser)]
#[command(name = "aesn", version, about = "Sequence labeling with attentive syntax ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with its metrics log to --out.
    Train(TrainArgs),
    /// Score a model on a labeled split.
    Eval(DataArgs),
    /// Label a split and write `token pos label` rows.
    Predict(PredictArgs),
    /// Dump memory weights, syntax attention and gate norms per token.
    Inspect(InspectArgs),
    /// Write a synthetic corpus with planted syntactic cues.
    GenSynth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_str(self) -> &'static str {
        match self {
            Switch::On => "on",
            Switch::Off => "off",
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// key=value settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Scored with the selected model after training.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Trees for the training split (default: sibling `.trees`).
    #[arg(long)]
    trees: Option<PathBuf>,
    /// Dependencies for the training split (default: sibling `.deps`).
    #[arg(long)]
    deps: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
    /// Comma-separated subset of pos,con,dep, or `none`.
    #[arg(long)]
    syntax: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long, value_enum)]
    gate: Option<Switch>,
    #[arg(long = "crf-mask", value_enum)]
    crf_mask: Option<Switch>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Split to read.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    trees: Option<PathBuf>,
    #[arg(long)]
    deps: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// 0-based sentence index (default: all).
    #[arg(long)]
    sentence: Option<usize>,
    /// 0-based token index within the sentence.
    #[arg(long)]
    token: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long = "train-size", default_value_t = 500)]
    train_size: usize,
    #[arg(long = "dev-size", default_value_t = 100)]
    dev_size: usize,
    #[arg(long = "test-size", default_value_t = 100)]
    test_size: usize,
    /// Name words shared by all entity types.
    #[arg(long, default_value_t = 40)]
    names: usize,
}

fn build_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let mut overrides: Vec<(&str, String)> = Vec::new();
    if let Some(p) = &a.train {
        overrides.push(("train", p.display().to_string()));
    }
    if let Some(p) = &a.dev {
        overrides.push(("dev", p.display().to_string()));
    }
    if let Some(p) = &a.test {
        overrides.push(("test", p.display().to_string()));
    }
    if let Some(p) = &a.trees {
        overrides.push(("trees", p.display().to_string()));
    }
    if let Some(p) = &a.deps {
        overrides.push(("deps", p.display().to_string()));
    }
    if let Some(p) = &a.out {
        overrides.push(("out", p.display().to_string()));
    }
    if let Some(v) = &a.encoder {
        overrides.push(("encoder", v.clone()));
    }
    if let Some(v) = &a.syntax {
        overrides.push(("syntax", v.clone()));
    }
    if let Some(v) = &a.fusion {
        overrides.push(("fusion", v.clone()));
    }
    if let Some(v) = a.gate {
        overrides.push(("gate", v.as_str().into()));
    }
    if let Some(v) = a.crf_mask {
        overrides.push(("crf_mask", v.as_str().into()));
    }
    if let Some(v) = a.seed {
        overrides.push(("seed", v.to_string()));
    }
    for (k, v) in overrides {
        c.set(k, &v)?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let c = build_config(&a)?;
    let (Some(train_path), Some(dev_path)) = (&c.train, &c.dev) else {
        bail!("train needs --train and --dev (or train=/dev= in the config)");
    };
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    fs::create_dir_all(&out)?;
    let train_set = load_dataset(train_path, c.trees.as_deref(), c.deps.as_deref(), &c.syntax)?;
    let dev_set = load_dataset(dev_path, None, None, &c.syntax)?;
    if train_set.repairs + dev_set.repairs > 0 {
        eprintln!("repaired {} BIO labels", train_set.repairs + dev_set.repairs);
    }
    if train_set.pos_conflicts > 0 {
        eprintln!("{} POS column/tree disagreements (POS column kept)", train_set.pos_conflicts);
    }
    fs::write(out.join("config.txt"), c.to_text())?;
    let start = Instant::now();
    eprintln!("{LOG_HEADER}");
    let outcome = train::train_with(&c, &train_set, &dev_set, |e| eprintln!("{}", e.line()))?;
    fs::write(out.join("metrics.tsv"), format_log(&outcome.log))?;
    checkpoint::save(&outcome.model, &out.join("model.aesn"))?;
    eprintln!(
        "best dev epoch {} in {:.1}s; model written to {}",
        outcome.best_epoch,
        start.elapsed().as_secs_f64(),
        out.join("model.aesn").display()
    );
    if let Some(test_path) = &c.test {
        let test_set = load_dataset(test_path, None, None, &c.syntax)?;
        let report = train::evaluate(&outcome.model, &test_set)?;
        fs::write(out.join("test_report.txt"), report.to_string())?;
        print!("{report}");
    }
    Ok(())
}

fn load_split(model_syntax: &[SyntaxType], d: &DataArgs) -> Result<aesn::data::Dataset> {
    load_dataset(&d.test, d.trees.as_deref(), d.deps.as_deref(), model_syntax)
        .with_context(|| format!("loading {}", d.test.display()))
}

fn cmd_eval(d: DataArgs) -> Result<()> {
    let model = checkpoint::load(&d.model).with_context(|| format!("loading {}", d.model.display()))?;
    let data = load_split(&model.config.syntax, &d)?;
    print!("{}", train::evaluate(&model, &data)?);
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.data.model)?;
    let data = load_split(&model.config.syntax, &a.data)?;
    let mut out = output(a.out.as_deref())?;
    train::predict(&model, &data, &mut out)?;
    out.flush()?;
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let model = checkpoint::load(&a.data.model)?;
    let data = load_split(&model.config.syntax, &a.data)?;
    let rows = train::inspect(&model, &data, a.sentence, a.token)?;
    let mut out = output(a.out.as_deref())?;
    for r in rows {
        writeln!(out, "{}", r.to_tsv())?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_gen_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        train: a.train_size,
        dev: a.dev_size,
        test: a.test_size,
        names: a.names,
        noise: a.noise,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let paths = gen_synth(&spec, &a.out)?;
    for p in [paths.train, paths.dev, paths.test] {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
    }
}
