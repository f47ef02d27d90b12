//! Command line driver for the two-level solver and dipole forecaster.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for invalid
//! configuration, 3 for runtime failures. Every failure prints one
//! machine-parsable line to stderr: `error[config]: ...` or
//! `error[runtime]: ...`.

use clap::{Args, Parser, Subcommand, ValueEnum};

use two_level::dataset::{self, DatasetConfig};
use two_level::evaluation::{
    evaluate_grid, export_comparison_csv, export_matrix_csv, normalized_test_loss,
    DynamicsForecaster, Forecaster, LstmForecaster, TestGridConfig, ZeroForecaster,
};
use two_level::fields::FieldSpec;
use two_level::model::{self, ModelConfig};
use two_level::physics::{
    convergence_study, solve_trajectory, write_trajectory_csv, QuantumState, SplitScheme,
    TimeGrid, TwoLevelParams, DEFAULT_DT, DEFAULT_N_POINTS,
};
use two_level::rng::derive_seed;
use two_level::training::{self, write_history_csv, TrainConfig};
use two_level::Error as CoreError;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Gate for the convergence self-test: the observed order under dt halving
/// must land here for the default second-order scheme.
const ORDER_WINDOW: (f64, f64) = (1.8, 2.2);

fn long_version() -> &'static str {
    let text = format!(
        "{} (dataset format v{}, checkpoint format v{})",
        env!("CARGO_PKG_VERSION"),
        dataset::DATASET_VERSION,
        model::CHECKPOINT_VERSION,
    );
    Box::leak(text.into_boxed_str())
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "error[config]: {msg}"),
            CliError::Runtime(msg) => write!(f, "error[runtime]: {msg}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::Config(_) => CliError::Config(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "tls",
    version = long_version(),
    about = "Driven two-level atom propagator with a conditional seq2seq dipole forecaster"
)]
struct Cli {
    /// Override the command's primary seed (dataset seed, train seeds,
    /// envelope seed, or gradient-check base, depending on the command).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides the TLS_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one driven trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Generate a training dataset container from a TOML recipe.
    GenData(GenDataArgs),
    /// Train the forecaster on a dataset container.
    Train(TrainArgs),
    /// Score a forecaster over an amplitude-frequency sweep.
    Eval(EvalArgs),
    /// Forecast one trajectory and write a truth/forecast overlay CSV.
    Rollout(RolloutArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Measure the propagator's convergence order under dt halving.
    Convergence(ConvergenceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldKind {
    Zero,
    Sine,
    Pulse,
    Random,
    Linear,
}

/// Drive description shared by the trajectory-level commands. Sine, pulse,
/// and random drives read --amp/--freq; the linear ramp reads --a1/--a2.
#[derive(Args)]
struct FieldArgs {
    /// Drive family.
    #[arg(long = "field", value_enum, default_value = "sine")]
    family: FieldKind,
    /// Peak amplitude A.
    #[arg(long, default_value_t = 1.0)]
    amp: f64,
    /// Carrier angular frequency w.
    #[arg(long, default_value_t = 1.0)]
    freq: f64,
    /// First slope factor of the linear ramp.
    #[arg(long, default_value_t = 1.0)]
    a1: f64,
    /// Second slope factor of the linear ramp.
    #[arg(long, default_value_t = 1.0)]
    a2: f64,
    /// Random-envelope seed.
    #[arg(long, default_value_t = 0)]
    envelope_seed: u64,
    /// Random-envelope component count.
    #[arg(long, short = 'K', default_value_t = 4)]
    components: u32,
}

impl FieldArgs {
    fn to_spec(&self, seed_override: Option<u64>) -> CliResult<FieldSpec> {
        build_field_spec(
            self.family,
            self.amp,
            self.freq,
            self.a1,
            self.a2,
            self.envelope_seed,
            self.components,
            seed_override,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn build_field_spec(
    family: FieldKind,
    amp: f64,
    freq: f64,
    a1: f64,
    a2: f64,
    envelope_seed: u64,
    components: u32,
    seed_override: Option<u64>,
) -> CliResult<FieldSpec> {
    let envelope_seed = seed_override.unwrap_or(envelope_seed);
    let spec = match family {
        FieldKind::Zero => FieldSpec::zero(),
        FieldKind::Sine => FieldSpec::sine(amp, freq),
        FieldKind::Pulse => FieldSpec::pulse(amp, freq),
        FieldKind::Random => FieldSpec::random_pulse(amp, freq, envelope_seed, components),
        FieldKind::Linear => FieldSpec::linear(a1, a2),
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    field: FieldArgs,
    /// Grid origin.
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    /// Grid step.
    #[arg(long, default_value_t = DEFAULT_DT)]
    dt: f64,
    /// Grid length in nodes.
    #[arg(long, default_value_t = DEFAULT_N_POINTS)]
    points: usize,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset recipe (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output dataset container path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model and optimizer settings (TOML with [model] and [train] tables).
    #[arg(long)]
    config: PathBuf,
    /// Dataset container to train on.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Resume from this checkpoint instead of a fresh initialization; its
    /// model shape must match the [model] table.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Optional epoch history CSV path.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ForecasterKind {
    Lstm,
    Dynamics,
    Zero,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation sweep settings (TOML).
    #[arg(long = "grid-config")]
    grid_config: PathBuf,
    /// Which forecaster to score.
    #[arg(long, value_enum, default_value = "lstm")]
    forecaster: ForecasterKind,
    /// Checkpoint path; required for the lstm forecaster.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed window length for the stub forecasters (the lstm forecaster
    /// takes it from its checkpoint).
    #[arg(long, default_value_t = 100)]
    encoder_length: usize,
    /// Output loss matrix CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RolloutArgs {
    /// Checkpoint to forecast with.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    field: FieldArgs,
    /// Forecast length in nodes.
    #[arg(long, default_value_t = 10_000)]
    horizon: usize,
    /// Segment length for the reported normalized loss.
    #[arg(long, default_value_t = 100)]
    segment: usize,
    /// Output overlay CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Hidden width of the probe model.
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Encoder window length of the probe model.
    #[arg(long, default_value_t = 10)]
    encoder_length: usize,
    /// Decoder window length of the probe model.
    #[arg(long, default_value_t = 10)]
    decoder_length: usize,
    /// Number of random probes.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Gradients below this magnitude are skipped.
    #[arg(long, default_value_t = 1e-8)]
    floor: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// The convergence self-test defaults to the slow resonant drive whose
/// dipole error the order gate was calibrated on.
#[derive(Args)]
struct ConvergenceArgs {
    /// Drive family.
    #[arg(long = "field", value_enum, default_value = "sine")]
    family: FieldKind,
    /// Peak amplitude A.
    #[arg(long, default_value_t = 1.0)]
    amp: f64,
    /// Carrier angular frequency w.
    #[arg(long, default_value_t = 0.5)]
    freq: f64,
    /// First slope factor of the linear ramp.
    #[arg(long, default_value_t = 1.0)]
    a1: f64,
    /// Second slope factor of the linear ramp.
    #[arg(long, default_value_t = 1.0)]
    a2: f64,
    /// Random-envelope seed.
    #[arg(long, default_value_t = 0)]
    envelope_seed: u64,
    /// Random-envelope component count.
    #[arg(long, short = 'K', default_value_t = 4)]
    components: u32,
    /// Propagation span; must be an integer multiple of every step.
    #[arg(long, default_value_t = 40.0)]
    span: f64,
    /// Comma-separated step sizes, largest first.
    #[arg(long, default_value = "0.05,0.025,0.0125", value_delimiter = ',')]
    dts: Vec<f64>,
    /// Reference refinement factor per step size.
    #[arg(long, default_value_t = 64)]
    refinement: usize,
    /// Use the first-order split instead (a negative control; its error
    /// ratios are expected to fail the second-order gate).
    #[arg(long)]
    first_order: bool,
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (tls simulate | head).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code: u8 = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Err(err) = configure_threads(cli.threads) {
        eprintln!("{err}");
        return ExitCode::from(err.exit_code());
    }
    let outcome = match cli.command {
        Command::Simulate(args) => run_simulate(args, cli.seed),
        Command::GenData(args) => run_gen_data(args, cli.seed),
        Command::Train(args) => run_train(args, cli.seed),
        Command::Eval(args) => run_eval(args, cli.seed),
        Command::Rollout(args) => run_rollout(args, cli.seed),
        Command::Gradcheck(args) => run_gradcheck(args, cli.seed),
        Command::Convergence(args) => run_convergence(args, cli.seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}

/// Thread count priority: --threads flag, then TLS_THREADS, then rayon's
/// default. Results never depend on the choice; only wall time does.
fn configure_threads(flag: Option<usize>) -> CliResult {
    let from_env = match std::env::var("TLS_THREADS") {
        Ok(text) => Some(text.parse::<usize>().map_err(|_| {
            CliError::Config(format!(
                "TLS_THREADS must be a positive integer, got {text:?}"
            ))
        })?),
        Err(_) => None,
    };
    let Some(threads) = flag.or(from_env) else {
        return Ok(());
    };
    if threads == 0 {
        return Err(CliError::Config("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("cannot configure thread pool: {e}")))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    // e.message() is the single-line diagnostic without the span rendering.
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
}

fn create_out(path: &Path) -> CliResult<BufWriter<File>> {
    let file = File::create(path)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn run_simulate(args: SimulateArgs, seed: Option<u64>) -> CliResult {
    let spec = args.field.to_spec(seed)?;
    let grid = TimeGrid::new(args.t0, args.dt, args.points)?;
    let params = TwoLevelParams::default();
    let trajectory = solve_trajectory(&params, &spec, &grid, &QuantumState::ground())?;
    match &args.out {
        Some(path) => {
            let mut out = create_out(path)?;
            write_trajectory_csv(&trajectory, &mut out)?;
            out.flush()?;
            println!("wrote {} nodes to {}", trajectory.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            write_trajectory_csv(&trajectory, &mut out)?;
        }
    }
    Ok(())
}

fn run_gen_data(args: GenDataArgs, seed: Option<u64>) -> CliResult {
    let mut config: DatasetConfig = read_toml(&args.config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    let dataset = dataset::generate_dataset(&config)?;
    dataset::write_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} train / {} val windows from {} waves to {}",
        dataset.train.len(),
        dataset.val.len(),
        config.wave_count(),
        args.out.display()
    );
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
}

fn run_train(args: TrainArgs, seed: Option<u64>) -> CliResult {
    let mut file: TrainFile = read_toml(&args.config)?;
    if let Some(seed) = seed {
        file.train.shuffle_seed = seed;
        file.train.init_seed = seed;
    }
    file.model.validate()?;
    file.train.validate()?;
    let dataset = dataset::read_dataset(&args.data)?;
    if dataset.config.encoder_length != file.model.encoder_length
        || dataset.config.decoder_length() != file.model.decoder_length
    {
        return Err(CliError::Config(format!(
            "dataset windows are {}+{} but the model expects {}+{}",
            dataset.config.encoder_length,
            dataset.config.decoder_length(),
            file.model.encoder_length,
            file.model.decoder_length,
        )));
    }

    let total_epochs = file.train.epochs;
    let mut log_epoch = |record: &training::EpochRecord| {
        eprintln!(
            "epoch {:>4}/{}: train {:.6} val {:.6} ({:.1}s)",
            record.epoch, total_epochs, record.train_rmse, record.val_rmse, record.seconds
        );
    };
    let outcome = match &args.resume {
        Some(path) => {
            let (params, resumed_config) = model::read_checkpoint(path)?;
            if resumed_config != file.model {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different model shape",
                    path.display()
                )));
            }
            training::train_from_observed(
                &dataset,
                &file.model,
                &file.train,
                params,
                Some(&args.checkpoint),
                &mut log_epoch,
            )?
        }
        None => training::train_observed(
            &dataset,
            &file.model,
            &file.train,
            Some(&args.checkpoint),
            &mut log_epoch,
        )?,
    };
    if let Some(path) = &args.history {
        let mut out = create_out(path)?;
        write_history_csv(&outcome.history, &mut out)?;
        out.flush()?;
    }
    let final_train = outcome
        .history
        .records
        .last()
        .map(|r| r.train_rmse)
        .unwrap_or(f64::NAN);
    println!(
        "wrote checkpoint to {} (final train RMSE {:.6})",
        args.checkpoint.display(),
        final_train
    );
    Ok(())
}

fn run_eval(args: EvalArgs, seed: Option<u64>) -> CliResult {
    let mut config: TestGridConfig = read_toml(&args.grid_config)?;
    if let Some(seed) = seed {
        config.envelope_seed = seed;
    }
    config.validate()?;

    let (forecaster, encoder_length): (Box<dyn Forecaster>, usize) = match args.forecaster {
        ForecasterKind::Lstm => {
            let Some(path) = &args.checkpoint else {
                return Err(CliError::Config(
                    "the lstm forecaster needs --checkpoint".into(),
                ));
            };
            let (params, model_config) = model::read_checkpoint(path)?;
            let encoder_length = model_config.encoder_length;
            (
                Box::new(LstmForecaster::new(params, model_config)?),
                encoder_length,
            )
        }
        ForecasterKind::Dynamics => (
            Box::new(DynamicsForecaster::default()),
            args.encoder_length,
        ),
        ForecasterKind::Zero => (Box::new(ZeroForecaster), args.encoder_length),
    };

    let matrix = evaluate_grid(forecaster.as_ref(), &config, encoder_length)?;
    let mut out = create_out(&args.out)?;
    export_matrix_csv(&matrix, &mut out)?;
    out.flush()?;
    let failed = matrix.losses().iter().filter(|v| v.is_nan()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} cells failed", matrix.losses().len());
    }
    match matrix.median_finite() {
        Some(median) => println!("median normalized loss: {median:.6e}"),
        None => println!("median normalized loss: none (all cells failed)"),
    }
    println!("wrote {} cells to {}", matrix.losses().len(), args.out.display());
    Ok(())
}

fn run_rollout(args: RolloutArgs, seed: Option<u64>) -> CliResult {
    let spec = args.field.to_spec(seed)?;
    if args.horizon == 0 {
        return Err(CliError::Config("horizon must be at least 1".into()));
    }
    let (params, model_config) = model::read_checkpoint(&args.checkpoint)?;
    let encoder_length = model_config.encoder_length;
    let grid = TimeGrid::new(0.0, DEFAULT_DT, encoder_length + args.horizon)?;
    let truth = solve_trajectory(
        &TwoLevelParams::default(),
        &spec,
        &grid,
        &QuantumState::ground(),
    )?;
    let forecaster = LstmForecaster::new(params, model_config)?;
    let predictions =
        forecaster.forecast(&truth.d()[..encoder_length], &spec, &grid, args.horizon)?;
    let loss = normalized_test_loss(
        &predictions,
        &truth.d()[encoder_length..],
        args.segment,
    )?;

    // The seed window has no forecast; pad it with the truth so every grid
    // node gets a row.
    let mut padded = truth.d()[..encoder_length].to_vec();
    padded.extend_from_slice(&predictions);
    let mut out = create_out(&args.out)?;
    export_comparison_csv(&grid, truth.e(), truth.d(), &padded, &mut out)?;
    out.flush()?;
    println!("normalized loss over horizon: {loss:.6e}");
    println!("wrote {} nodes to {}", grid.n_points(), args.out.display());
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs, seed: Option<u64>) -> CliResult {
    if args.seeds == 0 {
        return Err(CliError::Config("seed count must be at least 1".into()));
    }
    let config = ModelConfig {
        hidden_size: args.hidden,
        encoder_length: args.encoder_length,
        decoder_length: args.decoder_length,
        sos_policy: Default::default(),
    };
    config.validate()?;
    let base = seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..args.seeds)
        .map(|i| derive_seed(base, i as u64))
        .collect();
    let report = training::finite_difference_check(&config, &seeds, args.floor, args.tolerance)?;
    println!(
        "checked {} components over {} seeds: worst relative error {:.3e}",
        report.components_checked, report.seeds_checked, report.worst_relative_error
    );
    if report.passed {
        println!("gradient check passed (tolerance {:.1e})", args.tolerance);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
            report.worst_relative_error, args.tolerance
        )))
    }
}

fn run_convergence(args: ConvergenceArgs, seed: Option<u64>) -> CliResult {
    let spec = build_field_spec(
        args.family,
        args.amp,
        args.freq,
        args.a1,
        args.a2,
        args.envelope_seed,
        args.components,
        seed,
    )?;
    let scheme = if args.first_order {
        SplitScheme::LieFirstOrder
    } else {
        SplitScheme::Strang
    };
    let report = convergence_study(
        &TwoLevelParams::default(),
        &spec,
        args.span,
        &args.dts,
        args.refinement,
        scheme,
    )?;
    for (dt, err) in report.dts.iter().zip(&report.max_errors) {
        println!("dt {dt:.6}: max dipole error {err:.6e}");
    }
    for (pair, ratio) in report.dts.windows(2).zip(&report.ratios) {
        println!("error ratio {:.6} -> {:.6}: {ratio:.3}", pair[0], pair[1]);
    }
    if report.exact {
        println!("errors at machine precision; order gate passed trivially");
        return Ok(());
    }
    let (lo, hi) = ORDER_WINDOW;
    match report.observed_order {
        Some(order) if (lo..=hi).contains(&order) => {
            println!("observed order: {order:.4} (within [{lo}, {hi}])");
            Ok(())
        }
        Some(order) => {
            println!("observed order: {order:.4}");
            Err(CliError::Runtime(format!(
                "observed order {order:.4} falls outside the second-order window [{lo}, {hi}]"
            )))
        }
        None => Err(CliError::Runtime(
            "order estimate needs at least two step sizes".into(),
        )),
    }
}
