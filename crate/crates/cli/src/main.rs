//! `bismut`: run identity experiments from a TOML config and write reports.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bismut_core::config::{parse_schedule, ModelConfig, RunConfig, Verbosity, SELFCHECK_CONFIG};
use bismut_core::field_model::{build_augmentation, catalog, AugmentationSpec, AugmentedSystem};
use bismut_core::sde_engine::{simulate_with, SimOptions, TimeGrid};
use bismut_core::{parse_config, run_suite, write_artifacts, ExperimentKind};
use clap::{Parser, Subcommand, ValueEnum};

/// Overrides the configured `output_dir`.
const OUTPUT_ROOT_ENV: &str = "BISMUT_OUTPUT_ROOT";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "bismut",
    version,
    about = "Monte Carlo checks of Bismut-type integration by parts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment in a config file.
    Run {
        config: PathBuf,
        /// Root for the timestamped run directory (beats the env var and the config).
        #[arg(long)]
        output_root: Option<PathBuf>,
        /// Worker threads (default: the config value, else all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the model catalog.
    ListModels,
    /// Print the experiment kinds and what they check.
    ListExperiments,
    /// Run the fast built-in suite.
    Selfcheck {
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Simulate a few paths of a lifted system and write them as CSV.
    DumpPaths {
        #[arg(long, default_value = "bm")]
        model: String,
        #[arg(long, value_enum, default_value_t = Lift::Base)]
        lift: Lift,
        /// Perturbation for the weight lifts: a constant or `sin(a,f)`.
        #[arg(long, default_value = "0.5")]
        h: String,
        #[arg(long, default_value_t = 10)]
        paths: usize,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Start point, comma separated (default: the model's usual start).
        #[arg(long, value_delimiter = ',')]
        x: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Lift {
    Base,
    Girsanov,
    Ibp,
    Jacobian,
    Malliavin,
    Bismut,
}

fn init_logging(level: Verbosity) {
    let _ = env_logger::Builder::new()
        .filter_level(level.level())
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            output_root,
            threads,
        } => {
            let text = match fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            let mut cfg = match parse_config(&text) {
                Ok(c) => c,
                Err(errs) => {
                    eprintln!("error: invalid config {}:", config.display());
                    for e in &errs.0 {
                        eprintln!("  {e}");
                    }
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            if threads.is_some() {
                cfg.threads = threads;
            }
            let label = config.file_stem().and_then(|s| s.to_str()).unwrap_or("run").to_string();
            execute(&cfg, &label, output_root)
        }
        Command::ListModels => {
            for name in catalog::MODEL_NAMES {
                let model = ModelConfig::default_for(name).expect("catalog names have defaults");
                println!("{name}\tdim={}\t{}", model.dim(), describe_model(name));
            }
            ExitCode::SUCCESS
        }
        Command::ListExperiments => {
            for kind in ExperimentKind::ALL {
                println!("{}\t{}", kind.as_str(), kind.description());
            }
            ExitCode::SUCCESS
        }
        Command::Selfcheck { output_root } => {
            let cfg = parse_config(SELFCHECK_CONFIG).expect("built-in selfcheck config parses");
            execute(&cfg, "selfcheck", output_root)
        }
        Command::DumpPaths {
            model,
            lift,
            h,
            paths,
            steps,
            t,
            x,
            seed,
            out,
        } => {
            init_logging(Verbosity::Warn);
            match dump_paths(&model, lift, &h, paths, steps, t, x, seed, out.as_deref()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
            }
        }
    }
}

fn describe_model(name: &str) -> &'static str {
    match name {
        "bm" => "Brownian motion, X_i = e_i (params: dim)",
        "ou" => "Ornstein-Uhlenbeck, X_0 = -a x, X_1 = sigma (params: a, sigma)",
        "gbm" => "geometric Brownian motion, Stratonovich X_0 = mu x, X_1 = sigma x (params: mu, sigma)",
        "poly" => "polynomial vector fields on R^d (params: dim, drift, noise)",
        _ => "",
    }
}

fn output_root(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
    .unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

/// `<root>/<timestamp>-<label>`, suffixed if a run already claimed it.
fn run_directory(root: &Path, label: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{label}");
    let mut n = 0;
    loop {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}

fn execute(cfg: &RunConfig, label: &str, flag_root: Option<PathBuf>) -> ExitCode {
    init_logging(cfg.verbosity);
    let root = output_root(flag_root, cfg);
    let dir = match run_directory(&root, label) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: cannot create run directory under {}: {e}", root.display());
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    log::info!("writing artifacts to {}", dir.display());
    let outcome = match run_suite(cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for r in &outcome.reports {
        let _ = writeln!(out, "{}", r.summary_line());
    }
    if let Err(e) = write_artifacts(&dir, cfg, &outcome) {
        eprintln!("error: writing artifacts to {}: {e}", dir.display());
        return ExitCode::from(EXIT_FAILURE);
    }
    let _ = writeln!(
        out,
        "{} pass, {} inconclusive, {} fail; artifacts in {}",
        outcome.count(bismut_core::Verdict::Pass),
        outcome.count(bismut_core::Verdict::Inconclusive),
        outcome.count(bismut_core::Verdict::Fail),
        dir.display()
    );
    ExitCode::from(outcome.exit_code() as u8)
}

#[allow(clippy::too_many_arguments)]
fn dump_paths(
    model: &str,
    lift: Lift,
    h: &str,
    paths: usize,
    steps: usize,
    t: f64,
    x: Option<Vec<f64>>,
    seed: u64,
    out: Option<&Path>,
) -> Result<(), String> {
    let vfs = Arc::new(
        ModelConfig::default_for(model)
            .and_then(|m| m.build())
            .map_err(|e| e.to_string())?,
    );
    let x = x.unwrap_or_else(|| bismut_core::identity_suite::default_start(&vfs));
    let schedule = || parse_schedule(h, vfs.num_noise());
    let system = match lift {
        Lift::Base => AugmentedSystem::base_system(vfs.clone()),
        Lift::Girsanov => {
            build_augmentation(&AugmentationSpec::girsanov(vfs.clone(), schedule()?)).map_err(|e| e.to_string())?
        }
        Lift::Ibp => build_augmentation(&AugmentationSpec::ibp(vfs.clone(), schedule()?)).map_err(|e| e.to_string())?,
        Lift::Jacobian => build_augmentation(&AugmentationSpec::jacobian(vfs.clone())).map_err(|e| e.to_string())?,
        Lift::Malliavin => build_augmentation(&AugmentationSpec::malliavin(vfs.clone())).map_err(|e| e.to_string())?,
        Lift::Bismut => build_augmentation(&AugmentationSpec::bismut(vfs.clone())).map_err(|e| e.to_string())?,
    };
    let z0 = system.initial_state(&x).map_err(|e| e.to_string())?;
    let grid = TimeGrid::new(t, steps).map_err(|e| e.to_string())?;
    let opts = SimOptions {
        record_trajectories: true,
        ..SimOptions::default()
    };
    let ens = simulate_with(&system, &z0, &grid, paths, seed, &opts).map_err(|e| e.to_string())?;
    match out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
            ens.write_trajectories_csv(io::BufWriter::new(f), paths)
        }
        None => ens.write_trajectories_csv(io::stdout().lock(), paths),
    }
    .map_err(|e| e.to_string())
}
