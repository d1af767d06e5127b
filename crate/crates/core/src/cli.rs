//! Command-line front end. Each subcommand is a `cmd_*` function that
//! returns the text it would print, so it can be driven from tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::arch::{load_model, save_model, ArchSpec, Model};
use crate::datapipe::{build_dataset, gen_synthetic, load_csv, write_csv, CsvSchema, NormStats, SynthConfig, WindowedDataset};
use crate::eval::{EvalReport, RepeatSummary};
use crate::exec::{self, Execution};
use crate::train::{dataset_tensors, predict_classes, run_manifest, train, HyperParams, Optimizer};
use crate::{Error, Real, Result};

#[derive(Debug, Parser)]
#[command(name = "gfcnn", version, about = "Fault diagnosis with global-feature-enhanced CNNs")]
pub struct Cli {
    /// Worker threads for the parallel regions (0 = rayon default).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalise a CSV export and convert it to a GFIM image set.
    Convert(ConvertArgs),
    /// Train a model on a GFIM image set.
    Train(TrainArgs),
    /// Evaluate a model on a GFIM image set.
    Eval(EvalArgs),
    /// Print the parameter audit and shape trace of an architecture.
    Params(ParamsArgs),
    /// Write a synthetic fault dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Args)]
pub struct SchemaArgs {
    #[arg(long, default_value = "faultNumber")]
    pub label_column: String,
    #[arg(long, default_value = "simulationRun")]
    pub run_column: String,
    /// Columns to drop (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "sample,xmv_5,xmv_9")]
    pub exclude: Vec<String>,
    /// Explicit ordered variable columns (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub variables: Option<Vec<String>>,
}

impl SchemaArgs {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            label_column: self.label_column.clone(),
            run_column: self.run_column.clone(),
            exclude: self.exclude.clone(),
            variables: self.variables.clone(),
        }
    }
}

impl Default for SchemaArgs {
    fn default() -> Self {
        let s = CsvSchema::default();
        SchemaArgs {
            label_column: s.label_column,
            run_column: s.run_column,
            exclude: s.exclude,
            variables: s.variables,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// Existing statistics file to normalise with (test data).
    #[arg(long, conflicts_with = "stats_out")]
    pub stats: Option<PathBuf>,
    /// Compute statistics from this CSV and write them here (training data).
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    /// Number of classes; defaults to the largest label present.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Run manifest path; defaults to `<out>.run`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Image set evaluated after every epoch and at the end.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = OptimizerKind::Adam)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Repeat training for each seed (comma separated); outputs get a
    /// `.seed<k>` suffix and the eval macro-FDR is summarised.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

impl TrainArgs {
    pub fn new(data: impl Into<PathBuf>, arch: &str, out: impl Into<PathBuf>) -> Self {
        TrainArgs {
            data: data.into(),
            arch: arch.to_string(),
            out: out.into(),
            history: None,
            manifest: None,
            eval: None,
            batch_size: 128,
            epochs: 50,
            lr: 0.001,
            dropout: 0.5,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            seeds: None,
            precision: Precision::F32,
        }
    }

    pub fn hyper_params(&self, seed: u64) -> HyperParams {
        HyperParams {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.lr,
            dropout: self.dropout,
            optimizer: match self.optimizer {
                OptimizerKind::Adam => Optimizer::Adam {
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.adam_eps,
                },
                OptimizerKind::Sgd => Optimizer::Sgd,
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub arch: String,
    /// Image shape as `variables,window`.
    #[arg(long, value_delimiter = ',', default_values_t = [50, 20])]
    pub input: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub variables: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 400)]
    pub samples: usize,
    /// Coupling strength γ of the far variable pairs.
    #[arg(long, default_value_t = 1.0)]
    pub coupling: f64,
    /// Noise scale σ.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub white: f64,
    #[arg(long, default_value_t = 0.5)]
    pub ar: f64,
    #[arg(long, default_value_t = 3)]
    pub pairs: usize,
    /// Disable the per-class mean shifts.
    #[arg(long)]
    pub no_shift: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n: self.variables,
            classes: self.classes,
            runs_per_class: self.runs,
            samples_per_run: self.samples,
            coupling: self.coupling,
            noise: self.noise,
            white: self.white,
            ar: self.ar,
            pairs: self.pairs,
            shift: !self.no_shift,
        }
    }
}

fn exec_of(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Runs the parsed command line and returns what it prints.
pub fn run(cli: &Cli) -> Result<String> {
    if cli.jobs > 0 {
        exec::set_threads(cli.jobs)?;
    }
    let exec = exec_of(cli);
    match &cli.command {
        Command::Convert(a) => cmd_convert(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Params(a) => cmd_params(&a.arch, a.input_shape()?, a.classes),
        Command::Synth(a) => cmd_synth(a),
    }
}

impl ParamsArgs {
    fn input_shape(&self) -> Result<(usize, usize)> {
        match self.input[..] {
            [n, w] => Ok((n, w)),
            _ => Err(Error::invalid("--input takes two integers: variables,window")),
        }
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".txt");
    PathBuf::from(name)
}

pub fn cmd_convert(args: &ConvertArgs, exec: Execution) -> Result<String> {
    let series = load_csv(&args.csv, &args.schema.schema())?;
    let stats = match (&args.stats, &args.stats_out) {
        (Some(path), None) => NormStats::load(path)?,
        (None, Some(path)) => {
            let s = NormStats::compute(&series)?;
            s.save(path)?;
            s
        }
        _ => return Err(Error::invalid("give exactly one of --stats (existing file) or --stats-out (compute)")),
    };
    let classes = args.classes.unwrap_or(series.max_label());
    let ds = build_dataset(&series, &stats, args.window, classes, exec)?;
    ds.save(&args.out)?;
    let extra = [
        ("source", args.csv.display().to_string()),
        ("runs", series.runs().len().to_string()),
        ("scaling", "per-window min-max, round half away from zero".to_string()),
    ];
    fs::write(manifest_path(&args.out), ds.manifest(&extra))?;

    let mut out = format!("{} images ({} x {}, {} classes) -> {}\n", ds.len(), ds.n, ds.w, ds.classes, args.out.display());
    if !stats.degenerate.is_empty() {
        let names: Vec<&str> = stats.degenerate.iter().map(|&v| series.variable_names[v].as_str()).collect();
        let _ = writeln!(out, "warning: constant variables left unscaled: {}", names.join(", "));
    }
    if let Some(p) = &args.stats_out {
        let _ = writeln!(out, "statistics -> {}", p.display());
    }
    Ok(out)
}

fn suffixed(path: &Path, seed: u64) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(format!(".seed{seed}"));
    PathBuf::from(name)
}

fn train_one<T: Real>(args: &TrainArgs, ds: &WindowedDataset, eval_set: Option<&WindowedDataset>, seed: u64, suffix: bool, exec: Execution) -> Result<(String, Option<f64>)> {
    let arch = ArchSpec::parse(&args.arch, (ds.n, ds.w), ds.classes)?;
    let hp = args.hyper_params(seed);
    let model = Model::<T>::build(&arch, seed)?;
    let manifest = run_manifest(&model, &hp, ds, eval_set);
    let (model, history) = train(model, ds, &hp, eval_set, exec)?;

    let path = |p: &Path| if suffix { suffixed(p, seed) } else { p.to_path_buf() };
    let out = path(&args.out);
    save_model(&model, &out)?;
    let manifest_file = args.manifest.as_deref().map(path).unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".run");
        PathBuf::from(name)
    });
    fs::write(&manifest_file, manifest)?;
    if let Some(h) = &args.history {
        fs::write(path(h), history.to_text())?;
    }

    let last = history.epochs.last().expect("at least one epoch");
    let wall: f64 = history.epochs.iter().map(|e| e.wall_seconds).sum();
    let mut text = format!("seed {seed}: final loss {:.4}, train accuracy {:.4}", last.loss, last.train_accuracy);
    let mut macro_fdr = None;
    if let Some(e) = eval_set {
        let inputs = dataset_tensors::<T>(e)?;
        let preds = predict_classes(&model, &inputs, exec)?;
        let report = EvalReport::new(&preds, &e.labels(), e.classes, Vec::new())?;
        let _ = write!(text, ", eval macro-FDR {:.4}", report.macro_fdr);
        macro_fdr = Some(report.macro_fdr);
    }
    let _ = writeln!(text, " ({wall:.1}s) -> {}", out.display());
    eprintln!("{}", text.trim_end());
    Ok((text, macro_fdr))
}

pub fn cmd_train(args: &TrainArgs, exec: Execution) -> Result<String> {
    let ds = WindowedDataset::load(&args.data)?;
    let eval_set = args.eval.as_deref().map(WindowedDataset::load).transpose()?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![args.seed]);
    if seeds.is_empty() {
        return Err(Error::invalid("--seeds needs at least one seed"));
    }
    let suffix = args.seeds.is_some();
    let mut out = String::new();
    let mut scores = Vec::new();
    for &seed in &seeds {
        let (text, score) = match args.precision {
            Precision::F32 => train_one::<f32>(args, &ds, eval_set.as_ref(), seed, suffix, exec)?,
            Precision::F64 => train_one::<f64>(args, &ds, eval_set.as_ref(), seed, suffix, exec)?,
        };
        out.push_str(&text);
        scores.extend(score);
    }
    if suffix && !scores.is_empty() {
        let s = RepeatSummary::new(scores)?;
        let _ = writeln!(out, "macro-FDR over {} seeds: mean {:.4} min {:.4} max {:.4}", s.values.len(), s.mean, s.min, s.max);
    }
    Ok(out)
}

fn eval_with<T: Real>(args: &EvalArgs, ds: &WindowedDataset, exec: Execution) -> Result<EvalReport> {
    let model = load_model::<T>(&args.model)?;
    let arch = model.arch();
    if arch.classes != ds.classes {
        return Err(Error::invalid(format!("model has {} classes, image set has {}", arch.classes, ds.classes)));
    }
    let inputs = dataset_tensors::<T>(ds)?;
    let preds = predict_classes(&model, &inputs, exec)?;
    let metadata = vec![
        ("model".to_string(), args.model.display().to_string()),
        ("arch".to_string(), arch.arch_string()),
        ("data".to_string(), args.data.display().to_string()),
        ("precision".to_string(), T::NAME.to_string()),
    ];
    EvalReport::new(&preds, &ds.labels(), ds.classes, metadata)
}

pub fn cmd_eval(args: &EvalArgs, exec: Execution) -> Result<String> {
    let ds = WindowedDataset::load(&args.data)?;
    let report = match args.precision {
        Precision::F32 => eval_with::<f32>(args, &ds, exec)?,
        Precision::F64 => eval_with::<f64>(args, &ds, exec)?,
    };
    if let Some(p) = &args.report {
        fs::write(p, report.to_text())?;
    }
    let mut out = format!("macro-FDR {:.4}\n", report.macro_fdr);
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    Ok(out)
}

/// `1234567` as `1,234,567`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn cmd_params(arch: &str, input: (usize, usize), classes: usize) -> Result<String> {
    let spec = ArchSpec::parse(arch, input, classes)?;
    let trace = spec.trace_shapes()?;
    let count = crate::arch::Network::compile(&spec)?.count_params();
    let mut out = String::new();
    let _ = writeln!(out, "arch {}", spec.arch_string());
    let _ = writeln!(out, "input ({},{},1)", input.0, input.1);
    for (layer, shape) in &trace.steps {
        let _ = writeln!(out, "  {:<8} -> {shape}", layer.to_string());
    }
    let _ = writeln!(out, "  head     -> {classes}");
    let _ = writeln!(out, "conv {}", thousands(count.conv));
    let _ = writeln!(out, "mlp {}", thousands(count.mlp));
    let _ = writeln!(out, "fc {}", thousands(count.fc));
    if spec.has_global() {
        let _ = writeln!(out, "global-branch +{}", thousands(count.mlp + count.fc_from_global));
    }
    let _ = writeln!(out, "total {}", thousands(count.total));
    Ok(out)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let series = gen_synthetic(&args.config(), args.seed)?;
    write_csv(&series, &args.out)?;
    Ok(format!(
        "{} runs x {} samples x {} variables -> {}\n",
        series.runs().len(),
        args.samples,
        series.variables(),
        args.out.display()
    ))
}
