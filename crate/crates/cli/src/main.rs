//! `fmtforge` command line: demonstration collection, training, evaluation,
//! ablation grids and offline gravity compensation of episode stores.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fmtforge::harness::{self, ConfigError, EpisodeStore, ExperimentConfig, HarnessError, TrainedPolicy};
use fmtforge::wrench::ToolInertia;
use nalgebra::Vector3;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fmtforge", version, about = "Frequency-aware multimodal transformer policy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    no_freq_embed: bool,
    #[arg(long)]
    no_modality_embed: bool,
    #[arg(long)]
    no_cross_attention: bool,
    /// F/T sampling rate in Hz (30, 60, 120 or 200).
    #[arg(long, value_name = "HZ")]
    ft_rate: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations into an episode store.
    Collect(Common),
    /// Train a policy on an episode store.
    Train {
        #[command(flatten)]
        common: Common,
        /// Episode store to train on.
        #[arg(long)]
        store: PathBuf,
    },
    /// Roll out a trained policy (or the scripted expert) on fresh seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a policy.
        #[arg(long)]
        expert: bool,
    },
    /// Run the variant × task × seed grid.
    Ablate(Common),
    /// Rewrite an episode store with wrenches recompensated for a tool model.
    Compensate {
        #[command(flatten)]
        common: Common,
        /// Source episode store.
        #[arg(long)]
        store: PathBuf,
        /// Tool mass in kg.
        #[arg(long)]
        mass: Option<f64>,
        /// Tool centre of mass in the sensor frame, metres.
        #[arg(long, value_name = "X,Y,Z", value_parser = parse_vec3)]
        com: Option<[f64; 3]>,
        /// Gravity magnitude in m/s²; IMU readings are rescaled to it.
        #[arg(long)]
        gravity: Option<f64>,
    },
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}"))).collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|v| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(r) = c.ft_rate {
        cfg.ft_rate = r;
    }
    cfg.ablation.no_freq_embed |= c.no_freq_embed;
    cfg.ablation.no_modality_embed |= c.no_modality_embed;
    cfg.ablation.no_cross_attention |= c.no_cross_attention;
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Collect(c) => {
            let cfg = load_config(&c)?;
            let store = harness::collect(&cfg, &c.out)?;
            println!("collected {} episodes into {}", store.len(), c.out.display());
        }
        Command::Train { common: c, store } => {
            let cfg = load_config(&c)?;
            let store = EpisodeStore::open(&store)?;
            let (_, report) = harness::train(&cfg, &store, Some(&c.out), cfg.seed)?;
            write_text(&c.out.join("config.json"), &cfg.to_json())?;
            println!("trained {} steps on {} samples; final loss {}", report.steps, report.samples, harness::fmt6(report.final_loss()));
        }
        Command::Eval { common: c, checkpoint, expert } => {
            let cfg = load_config(&c)?;
            let report = if expert {
                harness::eval_expert(&cfg)?
            } else {
                let dir = checkpoint.expect("clap enforces --checkpoint");
                let policy = TrainedPolicy::load(&dir).map_err(|e| match e {
                    HarnessError::Io { .. } | HarnessError::Store { .. } | HarnessError::Tensor(_) => {
                        HarnessError::Config(ConfigError::Invalid(format!("cannot load checkpoint {}: {e}", dir.display())))
                    }
                    other => other,
                })?;
                harness::eval_policy(&policy, &cfg)?
            };
            report.write(&c.out)?;
            println!("success rate {} over {} episodes", harness::fmt6(report.success_rate()), report.episodes.len());
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c)?;
            let report = harness::ablate(&cfg, &c.out)?;
            print!("{}", report.summary_csv());
        }
        Command::Compensate { common: c, store, mass, com, gravity } => {
            let cfg = load_config(&c)?;
            let spec = cfg.task_spec();
            let mass = mass.unwrap_or(spec.tool_mass);
            let com = com.unwrap_or(spec.r_com);
            if gravity.is_some_and(|g| !(g > 0.0 && g.is_finite())) {
                return Err(ConfigError::Invalid("--gravity must be positive".into()).into());
            }
            let tool = ToolInertia::new(mass, Vector3::from(com)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let src = EpisodeStore::open(&store)?;
            let out = harness::recompensate(&src, &c.out, &tool, gravity)?;
            println!("wrote {} compensated episodes to {}", out.len(), c.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
