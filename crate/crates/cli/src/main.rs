use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmssl::autodiff::{AutodiffError, BackwardFault};
use mmssl::config::RunConfig;
use mmssl::diagnostics::{pipeline_gradcheck, GradcheckSetup};
use mmssl::model::attention_report;
use mmssl::model::checkpoint::load_checkpoint;
use mmssl::pipeline::{load_split, run_and_save, write_labels, LABELS_FILE};
use mmssl::synthcohort::{corrupt_modality, generate, CorruptionMode};
use mmssl::training::{evaluate, write_attention_means, write_metrics, ModalityAttention, Scheme, METRICS_FILE};
use mmssl::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

/// Multi-modal stress-episode classification with contrastive
/// self-supervision.
#[derive(Parser, Debug)]
#[command(name = "mmssl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (JSON). Built-in defaults are used when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Cohort directory, overriding `cohort_dir` from the configuration.
    #[arg(long, value_name = "DIR")]
    cohort: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with planted stress signatures.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generator seed, overriding `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, overriding `cohort_dir`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Corrupt one modality of an on-disk cohort in place.
    Corrupt {
        #[command(flatten)]
        common: Common,
        /// Modality id to corrupt.
        #[arg(long)]
        modality: String,
        /// Remove samples or replace them by high-variance noise.
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Fraction of samples affected, in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label every episode of the cohort and write labels.csv.
    Labels {
        #[command(flatten)]
        common: Common,
        /// Output file; defaults to `<output_dir>/labels.csv`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train one scheme and write metrics, loss curve, attention means and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Artifact directory, overriding `output_dir`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of the cohort.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Output directory for metrics.json; defaults to `<output_dir>/eval`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Report per-instance attention weights and per-modality means.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Episodes to report on.
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Output directory; defaults to `<output_dir>/attention`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = SizeArg::Small)]
        size: SizeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Inspect the run configuration.
    Config {
        /// Print the built-in defaults as JSON.
        #[arg(long)]
        print_defaults: bool,
        /// Validate a configuration file and print it with defaults filled in.
        #[arg(long, value_name = "FILE", conflicts_with = "print_defaults")]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    /// Training scheme, overriding `train.scheme`.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// Training seed, overriding `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the contrastive regularizer.
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    temperature: Option<f64>,
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse::<Scheme>().map_err(|e| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    })
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Drop,
    Noise,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    All,
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SizeArg {
    /// Two modalities, eight timesteps, width 8.
    Small,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FaultArg {
    Tanh,
    MatmulRhs,
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Json { .. } => EXIT_CONFIG,
            Error::Numerical(_) | Error::Autodiff(AutodiffError::Domain { .. }) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| {
            Failure::config(format!("cannot use config {}: {e}", path.display()))
        })?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &common.cohort {
        cfg.cohort_dir = dir.clone();
    }
    Ok(cfg)
}

fn cmd_synth(common: &Common, seed: Option<u64>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let root = out.unwrap_or(cfg.cohort_dir);
    let generated = generate(&cfg.synth, &root)?;
    println!(
        "wrote {} participants to {} (stressed fraction {:.3})",
        generated.cohort.participants.len(),
        root.display(),
        generated.stressed_fraction
    );
    Ok(())
}

fn cmd_corrupt(common: &Common, modality: &str, mode: ModeArg, fraction: f64, seed: u64) -> CliResult {
    let cfg = load_config(common)?;
    let mode = match mode {
        ModeArg::Drop => CorruptionMode::Drop,
        ModeArg::Noise => CorruptionMode::Noise,
    };
    corrupt_modality(&cfg.cohort_dir, &cfg.schema, modality, mode, fraction, seed)?;
    println!("corrupted {modality} in {}", cfg.cohort_dir.display());
    Ok(())
}

fn cmd_labels(common: &Common, out: Option<PathBuf>) -> CliResult {
    let cfg = load_config(common)?;
    let split = load_split(&cfg)?;
    let path = out.unwrap_or_else(|| cfg.output_dir.join(LABELS_FILE));
    create_parent(&path)?;
    write_labels(&path, &split.labels)?;
    let stressed = split.labels.iter().filter(|r| r.label).count();
    println!(
        "labeled {} episodes ({stressed} stressed) -> {}",
        split.labels.len(),
        path.display()
    );
    Ok(())
}

fn create_parent(path: &Path) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn print_attention(means: &[ModalityAttention]) {
    for m in means {
        println!("  mean alpha {:<12} {:.4}", m.modality, m.mean_alpha);
    }
}

fn cmd_train(common: &Common, o: &TrainOverrides, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = o.scheme {
        cfg.train.scheme = s;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(l) = o.lambda_reg {
        cfg.train.contrastive.lambda_reg = l;
    }
    if let Some(t) = o.temperature {
        cfg.train.contrastive.temperature = t;
    }
    cfg.train.validate()?;
    let data = load_split(&cfg)?.normalize();
    let out = out.unwrap_or(cfg.output_dir);
    let (_, report) = run_and_save(&data, &cfg.train, &out)?;
    println!(
        "{} seed {}: test accuracy {:.4} (majority baseline {:.4}) on {} episodes",
        cfg.train.scheme, cfg.train.seed, report.accuracy, report.majority_baseline, report.episodes
    );
    print_attention(&report.attention_means);
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, out: Option<PathBuf>) -> CliResult {
    let cfg = load_config(common)?;
    let (params, normalizer) = load_checkpoint(checkpoint)?;
    let data = load_split(&cfg)?.normalize_with(normalizer);
    let report = evaluate(&params, &data.test)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("eval"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_metrics(&out.join(METRICS_FILE), &report)?;
    println!(
        "test accuracy {:.4} (majority baseline {:.4}) on {} episodes",
        report.accuracy, report.majority_baseline, report.episodes
    );
    print_attention(&report.attention_means);
    Ok(())
}

fn cmd_attention(common: &Common, checkpoint: &Path, split: SplitArg, out: Option<PathBuf>) -> CliResult {
    let cfg = load_config(common)?;
    let (params, normalizer) = load_checkpoint(checkpoint)?;
    let data = load_split(&cfg)?.normalize_with(normalizer);
    let episodes = match split {
        SplitArg::All => [data.train, data.test].concat(),
        SplitArg::Train => data.train,
        SplitArg::Test => data.test,
    };
    let report = attention_report(&params, &episodes)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("attention"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let means: Vec<ModalityAttention> = report
        .modalities
        .iter()
        .zip(&report.means)
        .map(|(m, &a)| ModalityAttention {
            modality: m.clone(),
            mean_alpha: a,
        })
        .collect();
    write_attention_means(&out.join("attention_means.csv"), &means)?;
    let mut table = String::from("participant_id,t_start,t_end");
    for m in &report.modalities {
        table.push_str(&format!(",alpha_{m}"));
    }
    table.push('\n');
    for row in &report.instances {
        table.push_str(&format!("{},{},{}", row.participant_id, row.t_start, row.t_end));
        for a in &row.alpha {
            table.push_str(&format!(",{a}"));
        }
        table.push('\n');
    }
    let path = out.join("attention_instances.csv");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    println!("{} instances", report.instances.len());
    print_attention(&means);
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Option<FaultArg>) -> CliResult {
    let setup = GradcheckSetup {
        seed,
        ..GradcheckSetup::small()
    };
    let fault = fault.map(|f| match f {
        FaultArg::Tanh => BackwardFault::Tanh,
        FaultArg::MatmulRhs => BackwardFault::MatmulRhs,
    });
    let start = std::time::Instant::now();
    let result = pipeline_gradcheck(&setup, fault)?;
    let report = &result.report;
    println!(
        "gradcheck: {} parameters, step {:e}, tolerance {:e}",
        result.parameter_count, report.step, report.tol
    );
    for p in &report.params {
        println!(
            "  {:<4} {:<58} max rel err {:.3e}",
            if p.passed() { "ok" } else { "FAIL" },
            p.name,
            p.max_rel_error
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    if result.passed() {
        println!("PASS max rel err {:.3e} in {elapsed:.1}s", report.max_rel_error());
        Ok(())
    } else {
        let failed = report.params.iter().filter(|p| !p.passed()).count();
        Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!(
                "FAIL {failed} parameter groups exceed tolerance (max rel err {:.3e})",
                report.max_rel_error()
            ),
        })
    }
}

fn cmd_config(print_defaults: bool, config: Option<PathBuf>) -> CliResult {
    let cfg = match config {
        Some(path) => RunConfig::load(&path).map_err(|e| {
            Failure::config(format!("cannot use config {}: {e}", path.display()))
        })?,
        None if print_defaults => RunConfig::default(),
        None => return Err(Failure::config("config: pass --print-defaults or --config FILE")),
    };
    print!("{}", cfg.to_json());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { common, seed, out } => cmd_synth(&common, seed, out),
        Command::Corrupt {
            common,
            modality,
            mode,
            fraction,
            seed,
        } => cmd_corrupt(&common, &modality, mode, fraction, seed),
        Command::Labels { common, out } => cmd_labels(&common, out),
        Command::Train {
            common,
            overrides,
            out,
        } => cmd_train(&common, &overrides, out),
        Command::Eval {
            common,
            checkpoint,
            out,
        } => cmd_eval(&common, &checkpoint, out),
        Command::Attention {
            common,
            checkpoint,
            split,
            out,
        } => cmd_attention(&common, &checkpoint, split, out),
        Command::Gradcheck {
            size: SizeArg::Small,
            seed,
            inject_fault,
        } => cmd_gradcheck(seed, inject_fault),
        Command::Config {
            print_defaults,
            config,
        } => cmd_config(print_defaults, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
