//! `mmatch`: synthetic data, matching, training, evaluation, FLOPs tables
//! and gradient checks from the command line.
//!
//! Any flag may also come from a TOML file passed as `--config FILE`, with
//! one table per subcommand whose keys are flag names:
//!
//! ```toml
//! [match]
//! annotations = "data/annotations.json"
//! alpha = [0.05, 0.1]
//! no-refined = true
//! ```
//!
//! Flags given on the command line override the file. Failures print one
//! line, `error[<class>]: <message>`, and exit nonzero.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use mamba_matcher::flops::{self, FlopsConfig, Scheme};
use mamba_matcher::metrics::{write_pck_csv, NormalizerKind, PckMode, PckRow};
use mamba_matcher::runs::{self, MatchConfig, ModelSource, TrainRunConfig};
use mamba_matcher::ssm::{ScanMode, DEFAULT_CHUNK};
use mamba_matcher::synth::SynthConfig;
use mamba_matcher::train::{self, TrainConfig, GRAD_STEP};
use mamba_matcher::transfer::{LossForm, DEFAULT_SIGMA, TAU_EVAL, TAU_TRAIN};

#[derive(Parser, Debug)]
#[command(name = "mmatch", version, about = "Similarity-aware selective scan matcher")]
struct Cli {
    /// TOML file with a table of flags per subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic translated-feature dataset.
    GenSynth(GenSynthArgs),
    /// Match every annotated pair; write refined maps, keypoints and PCK.
    Match(MatchArgs),
    /// Train the aggregation, scan and projection layers.
    Train(TrainArgs),
    /// Recompute PCK from a keypoints.csv written by `match`.
    Eval(EvalArgs),
    /// Theoretical FLOPs of correlation aggregation schemes.
    Flops(FlopsArgs),
    /// Compare analytic gradients with central differences on a toy instance.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    PerImage,
    PerPoint,
}

impl From<Mode> for PckMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PerImage => PckMode::PerImage,
            Mode::PerPoint => PckMode::PerPoint,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Normalizer {
    Bbox,
    Image,
}

impl From<Normalizer> for NormalizerKind {
    fn from(n: Normalizer) -> Self {
        match n {
            Normalizer::Bbox => NormalizerKind::Bbox,
            Normalizer::Image => NormalizerKind::Image,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Loss {
    Squared,
    Euclidean,
}

impl From<Loss> for LossForm {
    fn from(l: Loss) -> Self {
        match l {
            Loss::Squared => LossForm::Squared,
            Loss::Euclidean => LossForm::Euclidean,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    /// Pass-through layers with a one-hot projection on the last level.
    Identity,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ScanArgs {
    /// Run the recurrence step by step instead of the chunked parallel scan.
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    chunk: usize,
}

impl ScanArgs {
    fn mode(&self) -> ScanMode {
        if self.sequential {
            ScanMode::Sequential
        } else {
            ScanMode::Parallel { chunk: self.chunk }
        }
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct PckArgs {
    /// PCK thresholds.
    #[arg(long = "alpha", action = ArgAction::Set, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.15])]
    alphas: Vec<f64>,
    #[arg(long = "mode", action = ArgAction::Set, value_enum, value_delimiter = ',', default_values_t = [Mode::PerImage, Mode::PerPoint])]
    modes: Vec<Mode>,
    #[arg(long, value_enum, default_value_t = Normalizer::Bbox)]
    normalizer: Normalizer,
}

impl PckArgs {
    fn modes(&self) -> Vec<PckMode> {
        self.modes.iter().copied().map(Into::into).collect()
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenSynthArgs {
    /// Output directory; receives annotations.json and features/.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    levels: usize,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 8)]
    keypoints: usize,
    /// Translations are drawn from [-max-shift, max-shift] cells per axis.
    #[arg(long, default_value_t = 2)]
    max_shift: usize,
    /// Fixed translation `DX,DY` in cells for every pair.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    shift: Option<Vec<i64>>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct MatchArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint (`.mmt` with its `.mmt.json` manifest).
    #[arg(long, conflicts_with = "init")]
    checkpoint: Option<PathBuf>,
    /// Fresh model when no checkpoint is given.
    #[arg(long, value_enum, default_value_t = Init::Identity)]
    init: Init,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// Projection gain of the identity init.
    #[arg(long, default_value_t = mamba_matcher::model::IDENTITY_GAIN)]
    gain: f64,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Soft-sampler radius, normalized units.
    #[arg(long, default_value_t = TAU_EVAL)]
    tau: f64,
    /// Kernel soft-argmax std, grid cells.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[command(flatten)]
    pck: PckArgs,
    #[command(flatten)]
    scan: ScanArgs,
    /// Skip writing refined/<pair>.mmt.
    #[arg(long)]
    no_refined: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Output directory; receives checkpoint.mmt(.json) and loss.csv.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint, keeping its optimizer state and step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seed of the pair schedule.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TAU_TRAIN)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = Loss::Squared)]
    loss: Loss,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[command(flatten)]
    scan: ScanArgs,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// keypoints.csv from `match`.
    #[arg(long)]
    keypoints: PathBuf,
    #[command(flatten)]
    pck: PckArgs,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct FlopsArgs {
    /// Schemes to report; all by default.
    #[arg(long = "scheme", action = ArgAction::Set, value_delimiter = ',')]
    schemes: Vec<String>,
    /// Sequence length.
    #[arg(long, default_value_t = FlopsConfig::default().n)]
    n: u64,
    #[arg(long, default_value_t = FlopsConfig::default().channels)]
    channels: u64,
    /// 4D convolution kernel width.
    #[arg(long, default_value_t = FlopsConfig::default().kernel)]
    kernel: u64,
    #[arg(long, default_value_t = FlopsConfig::default().d_model)]
    d_model: u64,
    #[arg(long, default_value_t = FlopsConfig::default().d_state)]
    d_state: u64,
    #[arg(long, default_value_t = FlopsConfig::default().d_inner)]
    d_inner: u64,
    #[arg(long, default_value_t = FlopsConfig::default().k_conv)]
    k_conv: u64,
    /// List every term of each scheme.
    #[arg(long)]
    terms: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GradCheckArgs {
    /// Seed of the toy instance.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = GRAD_STEP)]
    step: f64,
    #[arg(long, default_value_t = TAU_TRAIN)]
    tau: f64,
    /// Zero the scan block's output projection first.
    #[arg(long)]
    zero_block: bool,
    /// Also write the per-group report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised when a check ran fine but did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Config-file errors.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match parse(argv) {
        Ok(cli) => cli,
        Err(e) => return report(e),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: anyhow::Error) -> ExitCode {
    if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
        use clap::error::ErrorKind;
        if matches!(clap_err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            let _ = clap_err.print();
            return ExitCode::SUCCESS;
        }
    }
    eprintln!("error[{}]: {}", class_of(&e), one_line(&e));
    ExitCode::FAILURE
}

/// The error and its causes on one line, skipping causes whose text the
/// outer message already includes.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = match cause.downcast_ref::<clap::Error>() {
            Some(c) => c.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned(),
            None => cause.to_string(),
        };
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg.replace('\n', " ")
}

fn class_of(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<mamba_matcher::Error>() {
            return err.class();
        }
        if cause.is::<clap::Error>() {
            return "usage";
        }
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<CheckFailed>() {
            return "check-failed";
        }
        if cause.is::<io::Error>() {
            return "io";
        }
    }
    "internal"
}

const SUBCOMMANDS: [&str; 6] = ["gen-synth", "match", "train", "eval", "flops", "grad-check"];

/// Parses argv, splicing flags from `--config` right after the subcommand
/// so explicit flags, which come later, win.
fn parse(argv: Vec<String>) -> anyhow::Result<Cli> {
    let (config, at) = scan_argv(&argv);
    let (Some(path), Some(at)) = (config, at) else {
        return Ok(Cli::try_parse_from(&argv)?);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let doc: toml::Table = toml::from_str(&text)?;
    if let Some(key) = doc.keys().find(|k| !SUBCOMMANDS.contains(&k.as_str())) {
        bail!(ConfigError(format!("{}: unknown table `{key}`", path.display())));
    }
    let mut injected = Vec::new();
    if let Some(value) = doc.get(argv[at].as_str()) {
        let table = value
            .as_table()
            .ok_or_else(|| ConfigError(format!("{}: `{}` must be a table", path.display(), argv[at])))?;
        for (key, value) in table {
            injected.extend(flag_args(key, value).map_err(|m| ConfigError(format!("{}: {m}", path.display())))?);
        }
    }
    let mut spliced = argv[..=at].to_vec();
    spliced.extend(injected);
    spliced.extend_from_slice(&argv[at + 1..]);
    Ok(Cli::try_parse_from(spliced)?)
}

/// The `--config` path and the index of the subcommand, if present.
fn scan_argv(argv: &[String]) -> (Option<PathBuf>, Option<usize>) {
    let (mut config, mut at) = (None, None);
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].as_str();
        if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if at.is_none() && SUBCOMMANDS.contains(&a) {
            at = Some(i);
        }
        i += 1;
    }
    (config, at)
}

fn flag_args(key: &str, value: &toml::Value) -> Result<Vec<String>, String> {
    use toml::Value;
    let flag = format!("--{key}");
    let scalar = |v: &Value| -> Result<String, String> {
        match v {
            Value::String(s) => Ok(s.clone()),
            Value::Integer(i) => Ok(i.to_string()),
            Value::Float(f) => Ok(f.to_string()),
            other => Err(format!("`{key}` has unsupported value {other}")),
        }
    };
    match value {
        Value::Boolean(true) => Ok(vec![flag]),
        Value::Boolean(false) => Ok(vec![]),
        Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
            Ok(vec![flag, parts.join(",")])
        }
        v => Ok(vec![flag, scalar(v)?]),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Match(a) => run_match(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Flops(a) => flops_table(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn gen_synth(a: GenSynthArgs) -> anyhow::Result<()> {
    let shift = match a.shift.as_deref() {
        None => None,
        Some(&[dx, dy]) => Some((dx, dy)),
        Some(other) => bail!(ConfigError(format!("--shift takes DX,DY, got {other:?}"))),
    };
    let cfg = SynthConfig {
        seed: a.seed,
        height: a.height,
        width: a.width,
        channels: a.channels,
        levels: a.levels,
        pairs: a.pairs,
        keypoints: a.keypoints,
        max_shift: a.max_shift,
        shift,
    };
    let path = runs::gen_synth(&cfg, &a.out)?;
    println!("wrote {} pairs, annotations at {}", cfg.pairs, path.display());
    Ok(())
}

fn run_match(a: MatchArgs) -> anyhow::Result<()> {
    let model = match (a.checkpoint, a.init) {
        (Some(path), _) => ModelSource::Checkpoint { path },
        (None, Init::Identity) => ModelSource::Identity { gain: a.gain },
        (None, Init::Random) => ModelSource::Random { seed: a.init_seed },
    };
    let cfg = MatchConfig {
        annotations: a.annotations,
        output: a.out,
        model,
        tau: a.tau,
        sigma: a.sigma,
        alphas: a.pck.alphas.clone(),
        modes: a.pck.modes(),
        normalizer: a.pck.normalizer.into(),
        scan_mode: a.scan.mode(),
        blocks: a.blocks,
        write_refined: !a.no_refined,
    };
    let summary = runs::run_match(&cfg)?;
    println!(
        "matched {} pairs ({} keypoints) into {}",
        summary.pairs,
        summary.keypoints,
        cfg.output.display()
    );
    print_rows(&summary.rows)
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = TrainRunConfig {
        annotations: a.annotations,
        output: a.out,
        resume: a.resume,
        init_seed: a.init_seed,
        blocks: a.blocks,
        sigma: a.sigma,
        scan_mode: a.scan.mode(),
        loss: a.loss.into(),
        train: TrainConfig {
            steps: a.steps,
            lr: a.lr,
            seed: a.seed,
            tau: a.tau,
        },
    };
    let s = runs::run_train(&cfg)?;
    println!(
        "step {}: dataset loss {:.6e} -> {:.6e} ({:.1}% of initial)",
        s.steps,
        s.initial_loss,
        s.final_loss,
        100.0 * s.final_loss / s.initial_loss
    );
    println!("checkpoint at {}", cfg.output.join(runs::CHECKPOINT_FILE).display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let rows = runs::run_eval(&a.keypoints, &a.pck.alphas, &a.pck.modes(), a.pck.normalizer.into())?;
    match a.out {
        Some(path) => write_pck_csv(fs::File::create(&path)?, &rows)?,
        None => print_rows(&rows)?,
    }
    Ok(())
}

fn print_rows(rows: &[PckRow]) -> anyhow::Result<()> {
    write_pck_csv(io::stdout().lock(), rows)?;
    Ok(())
}

fn flops_table(a: FlopsArgs) -> anyhow::Result<()> {
    let cfg = FlopsConfig {
        n: a.n,
        channels: a.channels,
        kernel: a.kernel,
        d_model: a.d_model,
        d_state: a.d_state,
        d_inner: a.d_inner,
        k_conv: a.k_conv,
    };
    let schemes: Vec<Scheme> = if a.schemes.is_empty() {
        Scheme::ALL.to_vec()
    } else {
        a.schemes.iter().map(|s| s.parse()).collect::<Result<_, _>>()?
    };
    let mut out = io::stdout().lock();
    match a.format {
        Format::Csv => writeln!(out, "scheme,term,flops,human")?,
        Format::Table => writeln!(out, "{:<20} {:>22} {:>14}", "scheme", "flops", "human")?,
    }
    for scheme in schemes {
        let rows = if a.terms {
            flops::terms(scheme, &cfg)?
                .into_iter()
                .map(|t| (t.name, t.flops))
                .collect()
        } else {
            Vec::new()
        };
        let total = flops::estimate(scheme, &cfg)?;
        for (term, value) in rows.into_iter().chain([("total", total)]) {
            match a.format {
                Format::Csv => writeln!(out, "{scheme},{term},{value},{}", flops::human(value))?,
                Format::Table => {
                    let label = if term == "total" { scheme.to_string() } else { format!("  {term}") };
                    writeln!(out, "{label:<20} {value:>22.0} {:>14}", flops::human(value))?
                }
            }
        }
        if scheme == Scheme::Mamba && cfg == FlopsConfig::default() {
            let dev = (total - flops::PRINTED_MAMBA_TOTAL) / flops::PRINTED_MAMBA_TOTAL;
            let note = format!(
                "mamba as written: {} vs printed {}, deviation {:+.1}%",
                flops::human(total),
                flops::human(flops::PRINTED_MAMBA_TOTAL),
                100.0 * dev
            );
            match a.format {
                Format::Csv => eprintln!("{note}"),
                Format::Table => writeln!(out, "# {note}")?,
            }
        }
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> anyhow::Result<()> {
    let (mut bundle, cfg, sample) = train::toy_instance(a.seed)?;
    if a.zero_block {
        for b in &mut bundle.blocks {
            b.w_out = mamba_matcher::Tensor::zeros(b.w_out.shape());
        }
    }
    let report = train::grad_check(&bundle, &cfg, &sample, a.tau, a.step)?;
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "loss {:.6e}, step {:e}, tolerance {:e}",
        report.loss, report.step, report.tolerance
    )?;
    writeln!(
        out,
        "{:<20} {:>6} {:>12} {:>12} {:>12} {:>6}",
        "group", "count", "rel_error", "entry_rel", "max_grad", "pass"
    )?;
    for g in &report.groups {
        writeln!(
            out,
            "{:<20} {:>6} {:>12.3e} {:>12.3e} {:>12.3e} {:>6}",
            g.name, g.count, g.max_rel_error, g.max_entry_rel_error, g.max_grad, g.passed
        )?;
    }
    if let Some(path) = &a.out {
        let mut w = csv::Writer::from_path(path)?;
        for g in &report.groups {
            w.serialize(g)?;
        }
        w.flush()?;
    }
    if !report.passed() {
        bail!(CheckFailed(format!(
            "worst group relative error {:.3e} exceeds {:e}",
            report.worst(),
            report.tolerance
        )));
    }
    Ok(())
}
