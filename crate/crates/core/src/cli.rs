//! Command-line front end.
//!
//! Every command writes `run.meta` into its output directory: the command
//! name, the artifact version and every resolved option as `key=value`
//! lines keyed by long flag name. The file is itself a valid `--config`
//! input, so `flicker-ews <command> --config run.meta` repeats the run.
//! Values from `--config` take precedence over flags given on the command
//! line.
//!
//! Seeds: `generate` uses `--seed` as the dataset base seed; `train`
//! initializes the network from `--seed` and shuffles with `--seed + 1`;
//! `evaluate` and `simulate` use `--seed` as the replicate base seed.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{
    ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum,
};

use crate::datagen::{build_dataset, load_dataset, BuildOptions, DatasetManifest};
use crate::detector::{
    dl_score, load_ensemble, scan_series, trace_conservative_score, EnsembleSpec,
    DEFAULT_STRIDE_FRACTION, DEFAULT_VAR_WINDOW_BASE,
};
use crate::dynamics::{simulate, DriftFamily, PolyDrift, Schedule};
use crate::error::{Error, Result};
use crate::evaluation::{compare_detectors, CompareOptions, ExperimentSpec, Regime, DEFAULT_STEPS};
use crate::ingest::{load_csv, regularize, Direction, LoadOptions, TimeAxis};
use crate::keyvalue::KeyValues;
use crate::neuralnet::{
    train_with_progress, AdamConfig, Architecture, Checkpoint, Network, TrainConfig,
};

/// Config keys that describe a run rather than set an option.
const META_ONLY_KEYS: [&str; 2] = ["command", "artifact_version"];

#[derive(Debug, Parser)]
#[command(
    name = "flicker-ews",
    version,
    about = "Flickering detection as an early warning signal"
)]
pub struct Cli {
    /// Plain-text key=value file; its entries override flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic training dataset.
    Generate(GenerateArgs),
    /// Train the CNN-LSTM classifier on a generated dataset.
    Train(TrainArgs),
    /// ROC comparison of the classifier against the variance baseline.
    Evaluate(EvaluateArgs),
    /// Run an ensemble over an empirical record.
    Detect(DetectArgs),
    /// Export raw simulated trajectories.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub length: usize,
    #[arg(long, default_value_t = 2000)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::datagen::DEFAULT_VAR_WINDOW)]
    pub var_window: usize,
    /// Also export the channels as CSV.
    #[arg(long, action = ArgAction::Set, default_value_t = false, num_args = 0..=1, default_missing_value = "true")]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Checkpoint file name inside the output directory.
    #[arg(long, default_value = "model.ckpt")]
    pub name: String,
    #[arg(long, default_value_t = 5)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 300)]
    pub kernel: usize,
    #[arg(long, default_value_t = 50)]
    pub conv1_filters: usize,
    #[arg(long, default_value_t = 100)]
    pub conv2_filters: usize,
    #[arg(long, default_value_t = 50)]
    pub lstm1_units: usize,
    #[arg(long, default_value_t = 10)]
    pub lstm2_units: usize,
    #[arg(long, default_value_t = 0.05)]
    pub dropout: f64,
    /// Not supported; training always starts from a fresh initialization.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Checkpoint file or directory of `.ckpt` files.
    #[arg(long)]
    pub ensemble: PathBuf,
    /// Window fractions, comma separated (default 0.08,0.096,0.11,0.13,0.14,0.16).
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub window_fractions: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_STRIDE_FRACTION)]
    pub stride: f64,
    /// Training variance window in raw samples; scaled per window.
    #[arg(long, default_value_t = DEFAULT_VAR_WINDOW_BASE)]
    pub var_window_base: usize,
}

impl EnsembleArgs {
    fn load(&self) -> Result<EnsembleSpec> {
        let mut spec = load_ensemble(&self.ensemble, self.window_fractions.as_deref())?;
        spec.stride_fraction = self.stride;
        spec.var_window_base = self.var_window_base;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// System name or `all`.
    #[arg(long, default_value = "all")]
    pub system: String,
    /// Replicates per class for both detectors.
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, default_value_t = crate::evaluation::DEFAULT_DL_REPLICATES)]
    pub dl_replicates: usize,
    #[arg(long, default_value_t = crate::evaluation::DEFAULT_VAR_REPLICATES)]
    pub var_replicates: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Variance-score window (default scales 1000 with `--steps`).
    #[arg(long)]
    pub var_window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TimeAxisArg {
    Auto,
    Forward,
    Age,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub time_col: String,
    #[arg(long)]
    pub value_col: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = crate::ingest::DEFAULT_TARGET_LEN)]
    pub target_len: usize,
    #[arg(long, value_enum, default_value_t = TimeAxisArg::Auto)]
    pub time_axis: TimeAxisArg,
    #[arg(long, default_value = ",")]
    pub delimiter: char,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Flickering,
    Null,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Named system, or `poly` for the polynomial training drift.
    #[arg(long)]
    pub system: String,
    #[arg(long, value_enum, default_value_t = RegimeArg::Flickering)]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the system's noise level.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub b_start: Option<f64>,
    #[arg(long)]
    pub b_end: Option<f64>,
    /// Polynomial coefficients a,b,c,d,e,f,g for `--system poly`.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub coeffs: Option<Vec<f64>>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let (cli, matches) = match parse(argv) {
        Ok(parsed) => parsed,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(ParseFailure::Config(e)) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(&cli, &matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum ParseFailure {
    Clap(clap::Error),
    Config(Error),
}

fn command() -> clap::Command {
    Cli::command()
        .args_override_self(true)
        .mut_subcommands(|s| s.args_override_self(true))
}

fn parse(mut argv: Vec<OsString>) -> std::result::Result<(Cli, ArgMatches), ParseFailure> {
    if let Some(path) = config_path(&argv) {
        let kv = KeyValues::read(&path).map_err(ParseFailure::Config)?;
        for (k, v) in kv.iter() {
            if !META_ONLY_KEYS.contains(&k) && k != "config" {
                argv.push(format!("--{k}={v}").into());
            }
        }
    }
    let matches = command()
        .try_get_matches_from(argv)
        .map_err(ParseFailure::Clap)?;
    let cli = Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)?;
    Ok((cli, matches))
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if s == "--" {
            break;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Resolved options of the chosen subcommand, keyed by long flag name.
fn resolved_options(matches: &ArgMatches) -> (String, KeyValues) {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let mut cmd = command();
    cmd.build();
    let sub_cmd = cmd.find_subcommand(name).expect("known subcommand");
    let mut kv = KeyValues::new();
    for arg in sub_cmd.get_arguments() {
        let Some(long) = arg.get_long() else { continue };
        if matches!(long, "config" | "help" | "version") {
            continue;
        }
        if let Some(values) = sub.get_raw(arg.get_id().as_str()) {
            let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            kv.push(long, joined.join(","));
        }
    }
    (name.to_string(), kv)
}

fn write_run_meta(dir: &Path, matches: &ArgMatches) -> Result<()> {
    let (name, options) = resolved_options(matches);
    let mut kv = KeyValues::new();
    kv.push("command", name)
        .push("artifact_version", crate::ARTIFACT_VERSION);
    for (k, v) in options.iter() {
        kv.push(k, v);
    }
    kv.write(&dir.join("run.meta"))
}

pub fn execute(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => cmd_generate(a, matches),
        Command::Train(a) => cmd_train(a, matches),
        Command::Evaluate(a) => cmd_evaluate(a, matches),
        Command::Detect(a) => cmd_detect(a, matches),
        Command::Simulate(a) => cmd_simulate(a, matches),
    })
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs, matches: &ArgMatches) -> Result<()> {
    let mut manifest = DatasetManifest::new(args.length, args.per_class, args.seed);
    manifest.var_window = args.var_window;
    manifest.validate()?;
    prepare_out_dir(&args.out_dir)?;
    let start = Instant::now();
    build_dataset(
        &manifest,
        &args.out_dir,
        BuildOptions {
            export_csv: args.csv,
            ..BuildOptions::default()
        },
    )?;
    write_run_meta(&args.out_dir, matches)?;
    println!(
        "flicker: {n}  nonflicker: {n}  length: {}  ({:.1} s)",
        args.length,
        start.elapsed().as_secs_f64(),
        n = args.per_class
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs, matches: &ArgMatches) -> Result<()> {
    if let Some(path) = &args.resume {
        return Err(Error::Unsupported(format!(
            "resuming from {} (training always starts from a fresh initialization)",
            path.display()
        )));
    }
    let dataset = load_dataset(&args.data)?;
    let arch = Architecture {
        input_len: dataset.manifest.native_length,
        in_channels: 2,
        conv1_filters: args.conv1_filters,
        conv2_filters: args.conv2_filters,
        kernel: args.kernel,
        lstm1_units: args.lstm1_units,
        lstm2_units: args.lstm2_units,
        classes: 2,
        dropout: args.dropout,
    };
    let config = TrainConfig {
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        batch_size: args.batch,
        max_epochs: args.max_epochs,
        patience: args.patience,
        val_fraction: args.val_fraction,
        shuffle_seed: crate::derive_seed(args.seed, 1),
    };
    config.validate()?;
    prepare_out_dir(&args.out_dir)?;
    let net = Network::new(arch, args.seed)?;
    let start = Instant::now();
    let outcome = train_with_progress(net, &dataset.examples, &config, |r| {
        println!(
            "epoch {}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        );
    })?;
    let mut checkpoint = Checkpoint::new(outcome.network, dataset.manifest.var_window);
    checkpoint.config = config.to_key_values();
    checkpoint
        .config
        .push("init_seed", args.seed)
        .push("best_epoch", outcome.best_epoch)
        .push("dataset_base_seed", dataset.manifest.base_seed)
        .push("dataset_count_per_class", dataset.manifest.count_per_class);
    checkpoint.history = outcome.history.clone();
    checkpoint.save(&args.out_dir.join(&args.name))?;

    let mut hist = BufWriter::new(File::create(args.out_dir.join("history.csv"))?);
    writeln!(
        hist,
        "epoch,train_loss,train_accuracy,val_loss,val_accuracy"
    )?;
    for r in &outcome.history {
        writeln!(
            hist,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        )?;
    }
    hist.flush()?;
    write_run_meta(&args.out_dir, matches)?;
    println!(
        "best epoch {} saved to {} ({:.1} s)",
        outcome.best_epoch,
        args.out_dir.join(&args.name).display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn parse_systems(spec: &str) -> Result<Vec<DriftFamily>> {
    if spec == "all" {
        return Ok(DriftFamily::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

pub fn cmd_evaluate(args: &EvaluateArgs, matches: &ArgMatches) -> Result<()> {
    let systems = parse_systems(&args.system)?;
    let (dl_reps, var_reps) = match args.replicates {
        Some(n) => (n, n),
        None => (args.dl_replicates, args.var_replicates),
    };
    if dl_reps == 0 || var_reps == 0 {
        return Err(Error::InvalidArgument("replicates must be >= 1".into()));
    }
    let mut options = CompareOptions::scaled(args.steps, dl_reps, args.seed);
    options.var_replicates = var_reps;
    if let Some(w) = args.var_window {
        options.var_window = w;
    }
    let ensemble = args.ensemble.load()?;
    prepare_out_dir(&args.out_dir)?;
    let mut report = KeyValues::new();
    report.push("artifact_version", crate::ARTIFACT_VERSION);
    for family in systems {
        let c = compare_detectors(family, &ensemble, &options)?;
        let name = family.name();
        c.dl.export(&args.out_dir.join(format!("roc_{name}_dl.csv")))?;
        c.var
            .export(&args.out_dir.join(format!("roc_{name}_var.csv")))?;
        let mut scores = BufWriter::new(File::create(
            args.out_dir.join(format!("scores_{name}.csv")),
        )?);
        c.write_scores(&mut scores)?;
        scores.flush()?;
        for (k, v) in c.report(&options).iter() {
            report.push(format!("{name}.{k}"), v);
        }
        println!("{name}: dl_auc={:.4} var_auc={:.4}", c.dl.auc, c.var.auc);
    }
    report.write(&args.out_dir.join("report.txt"))?;
    write_run_meta(&args.out_dir, matches)
}

pub fn cmd_detect(args: &DetectArgs, matches: &ArgMatches) -> Result<()> {
    if !args.delimiter.is_ascii() {
        return Err(Error::InvalidArgument("delimiter must be ASCII".into()));
    }
    let options = LoadOptions {
        delimiter: args.delimiter as u8,
        time_axis: match args.time_axis {
            TimeAxisArg::Auto => TimeAxis::Auto,
            TimeAxisArg::Forward => TimeAxis::Forward,
            TimeAxisArg::Age => TimeAxis::Age,
        },
        source_label: None,
    };
    let series = load_csv(&args.input, &args.time_col, &args.value_col, &options)?;
    let values = regularize(&series, args.target_len)?;
    let ensemble = args.ensemble.load()?;
    let trace = scan_series(&values, &ensemble)?;
    prepare_out_dir(&args.out_dir)?;
    trace.export(&args.out_dir.join("trace.csv"))?;
    let mut reg = BufWriter::new(File::create(args.out_dir.join("regularized.csv"))?);
    writeln!(reg, "index,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(reg, "{i},{v}")?;
    }
    reg.flush()?;
    let mut summary = KeyValues::new();
    summary
        .push("source", &series.source_label)
        .push("rows", series.len())
        .push("dropped_rows", series.dropped_rows)
        .push("merged_rows", series.merged_rows)
        .push(
            "direction",
            match series.direction {
                Direction::TimeForward => "time_forward",
                Direction::TimeReversed => "time_reversed",
            },
        )
        .push("target_len", args.target_len)
        .push("members", ensemble.members.len())
        .push("trace_points", trace.len())
        .push("dl_score", dl_score(&trace.p_flicker)?)
        .push("conservative_score", trace_conservative_score(&trace)?);
    summary.write(&args.out_dir.join("summary.txt"))?;
    write_run_meta(&args.out_dir, matches)?;
    println!(
        "{}: {} rows ({} dropped), {} trace points, max p_flicker {:.4}",
        series.source_label,
        series.len(),
        series.dropped_rows,
        trace.len(),
        trace.p_flicker.iter().copied().fold(0.0, f64::max)
    );
    Ok(())
}

pub fn cmd_simulate(args: &SimulateArgs, matches: &ArgMatches) -> Result<()> {
    if args.replicates == 0 {
        return Err(Error::InvalidArgument("replicates must be >= 1".into()));
    }
    prepare_out_dir(&args.out_dir)?;
    let regime = match args.regime {
        RegimeArg::Flickering => Regime::Flickering,
        RegimeArg::Null => Regime::Null,
    };
    if args.system == "poly" {
        let c = args.coeffs.as_deref().ok_or_else(|| {
            Error::InvalidArgument("--system poly needs --coeffs a,b,c,d,e,f,g".into())
        })?;
        let [a, b, c, d, e, f, g] = <[f64; 7]>::try_from(c)
            .map_err(|_| Error::InvalidArgument("--coeffs takes exactly 7 values".into()))?;
        let drift = PolyDrift {
            a,
            b,
            c,
            d,
            e,
            f,
            g,
            p: crate::dynamics::TRAINING_P0,
        };
        let critical = drift.critical_point()?;
        let x0 = crate::dynamics::upper_equilibrium(&drift)
            .ok_or_else(|| Error::NoStationaryPoint("no positive equilibrium at p0".into()))?;
        let params = match regime {
            Regime::Flickering => {
                Schedule::linear_ramp(drift.p, args.b_end.unwrap_or(critical.p_star))
            }
            Regime::Null => Schedule::constant(drift.p),
        };
        let noise = Schedule::constant(args.sigma.unwrap_or(crate::datagen::SIGMA_FACTOR * x0));
        for i in 0..args.replicates {
            let seed = crate::derive_seed(args.seed, i as u64);
            let t = simulate(&drift, &params, &noise, x0, args.steps, args.dt, seed)?;
            t.export(&args.out_dir.join(format!("trajectory_{i}.csv")))?;
        }
    } else {
        let family: DriftFamily = args.system.parse()?;
        let mut spec =
            ExperimentSpec::new(family, regime, args.replicates, args.seed)?.with_steps(args.steps);
        spec.dt = args.dt;
        if let Some(s) = args.sigma {
            spec.sigma = s;
        }
        if let Some(b) = args.b_start {
            spec.b_start = b;
            spec.drift = spec.drift.with_b(b);
        }
        if let Some(b) = args.b_end {
            spec.b_end = b;
        }
        spec.validate()?;
        for i in 0..args.replicates {
            spec.replicate(i)?
                .export(&args.out_dir.join(format!("trajectory_{i}.csv")))?;
        }
    }
    write_run_meta(&args.out_dir, matches)?;
    println!(
        "wrote {} trajectories to {}",
        args.replicates,
        args.out_dir.display()
    );
    Ok(())
}
