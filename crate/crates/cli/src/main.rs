//! `dpin`: generate logs, train, evaluate, ablate, gradient-check and solve
//! tiny MDPs exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpin_core::agent::{load_checkpoint, save_checkpoint};
use dpin_core::harness::{
    evaluate_params, q_grad_check, run_ablation, train_run, write_metrics, ExperimentConfig, OracleQ, Variant,
};
use dpin_core::sim::{read_log, write_log, LogHeader, Transition};
use dpin_core::nn::primitive_suite;
use dpin_core::Error;

#[derive(Parser)]
#[command(name = "dpin", version, about = "Page-level interest Q-network research bench")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name (paper, desk, tiny, calibration, ablation) or TOML file.
    #[arg(long, short)]
    config: String,
    /// Override a config value, e.g. `--set training.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate uniformly explored requests and write an offline log.
    GenerateLog {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file (default: <output_dir>/log.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a log (generated on the fly unless --log is given).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Greedy evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate ablation variants over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Comma-separated variant names (default: all seven).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Compare back-propagated and finite-difference gradients of Q.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Seeded instances (weights and state).
        #[arg(long, default_value_t = 20)]
        instances: u64,
    },
    /// Solve a fixed-candidate simulator exactly by value iteration.
    Oracle {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Discount (default: training.gamma).
        #[arg(long)]
        gamma: Option<f64>,
    },
}

/// Gradient checks pass at or below this relative error.
const GRAD_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let kind = match &e {
                Error::Nn(_) => "numeric",
                Error::Feasibility(_) => "feasibility",
                Error::Config(_) => "config",
                Error::Io(_) => "io",
                Error::Parse(_) => "parse",
                Error::Corrupt(_) => "corrupt",
                Error::StateSpaceTooLarge { .. } => "state-space",
                Error::CheckpointMismatch { .. } => "checkpoint",
            };
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn output_file(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = File::create(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<File, Error> {
    File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn header(cfg: &ExperimentConfig, sim: &dpin_core::sim::Simulator) -> LogHeader {
    LogHeader::new(
        sim.layout(),
        cfg.sim.history_keep,
        sim.catalog().items.clone(),
        sim.users().iter().map(|u| u.profile).collect(),
    )
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::GenerateLog { cfg, out } => {
            let cfg = cfg.load()?;
            let sim = cfg.simulator()?;
            let log = cfg.generate_log(&sim)?;
            let path = match out {
                Some(p) => p,
                None => output_file(&cfg, "log.jsonl")?,
            };
            write_log(create(&path)?, &header(&cfg, &sim), &log.transitions)?;
            println!("{}", serde_json::to_string(&log.stats)?);
            println!("wrote {}", path.display());
        }
        Command::Train { cfg, log } => {
            let cfg = cfg.load()?;
            let sim = cfg.simulator()?;
            let model = cfg.build_model()?;
            let transitions: Vec<Transition> = match log {
                Some(path) => {
                    let (head, transitions) = read_log(open(&path)?)?;
                    if head != header(&cfg, &sim) {
                        return Err(Error::Config(format!(
                            "{} was logged from a different simulator (layout, catalog or users differ)",
                            path.display()
                        )));
                    }
                    transitions
                }
                None => cfg.generate_log(&sim)?.transitions,
            };
            let variant = cfg.variant()?;
            let run_id = format!("{}-s{}", variant.name(), cfg.training.seed);
            let run = train_run(&cfg, &sim, &model, &transitions, &run_id, true)?;
            let ckpt = output_file(&cfg, "checkpoint.json")?;
            save_checkpoint(&ckpt, &model, &run.params)?;
            let metrics = output_file(&cfg, "metrics.csv")?;
            write_metrics(create(&metrics)?, &run.rows)?;
            for r in &run.rows {
                println!(
                    "epoch {} loss {:.6} R_ad {:.4} R_fee {:.4} mean_episode_reward {:.4}",
                    r.epoch, r.loss, r.r_ad, r.r_fee, r.mean_episode_reward
                );
            }
            println!("wrote {} and {}", ckpt.display(), metrics.display());
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            episodes,
            seed,
        } => {
            let cfg = cfg.load()?;
            let sim = cfg.simulator()?;
            let model = cfg.build_model()?;
            let params = load_checkpoint(&checkpoint, &model)?;
            let seed = seed.unwrap_or(cfg.eval.seed);
            let eval = evaluate_params(&model, &params, &sim, episodes.unwrap_or(cfg.eval.episodes), seed)?;
            let variant = cfg.variant()?;
            let row = eval.row("evaluate", seed, variant.name(), 0, f64::NAN);
            let path = output_file(&cfg, "eval.csv")?;
            write_metrics(create(&path)?, std::slice::from_ref(&row))?;
            println!(
                "episodes {} steps {} R_ad {:.4} R_fee {:.4} mean_episode_reward {:.4}",
                eval.episodes,
                eval.steps,
                eval.r_ad,
                eval.r_fee,
                eval.mean_episode_reward()
            );
            println!("wrote {}", path.display());
        }
        Command::Ablate { cfg, seeds, variants } => {
            let cfg = cfg.load()?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
            };
            if seeds.is_empty() {
                return Err(Error::Config("--seeds is empty".into()));
            }
            let rows = run_ablation(&cfg, &variants, &seeds)?;
            let path = output_file(&cfg, "ablation.csv")?;
            write_metrics(create(&path)?, &rows)?;
            for v in &variants {
                let mine: Vec<f64> = rows.iter().filter(|r| r.variant == v.name()).map(|r| r.r_ad).collect();
                let mean = mine.iter().sum::<f64>() / mine.len() as f64;
                println!("{:<28} {:<24} mean R_ad {:.4}", v.name(), v.table_label(), mean);
            }
            println!("wrote {}", path.display());
        }
        Command::Gradcheck { cfg, eps, instances } => {
            let cfg = cfg.load()?;
            if instances == 0 {
                return Err(Error::Config("--instances must be positive".into()));
            }
            let mut worst = 0.0f64;
            for (name, report) in primitive_suite(instances, eps)? {
                println!("primitive {name:<30} max_relative_error {:e}", report.max_relative_error);
                worst = worst.max(report.max_relative_error);
            }
            let mut e2e = 0.0f64;
            let mut e2e_abs = 0.0f64;
            for seed in 0..instances {
                let report = q_grad_check(&cfg, seed, eps)?;
                e2e = e2e.max(report.max_relative_error);
                e2e_abs = e2e_abs.max(report.max_abs_error);
            }
            println!("q_value {:<32} max_relative_error {e2e:e} max_abs_error {e2e_abs:e}", "end-to-end");
            worst = worst.max(e2e);
            println!("max_relative_error {worst:e} eps {eps:e} instances {instances}");
            if worst > GRAD_TOLERANCE {
                println!("FAIL: above {GRAD_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
            println!("PASS");
        }
        Command::Oracle { cfg, gamma } => {
            let cfg = cfg.load()?;
            let sim = cfg.simulator()?;
            let gamma = gamma.unwrap_or(cfg.training.gamma);
            let oracle = OracleQ::solve(&sim, gamma)?;
            let path = output_file(&cfg, "oracle.csv")?;
            let mut out = create(&path)?;
            writeln!(out, "user,ads_used,organics_used,page_index,action,q,optimal")?;
            for key in oracle.states() {
                let best = oracle.greedy(key).expect("known state");
                for (action, q) in oracle.q_values(key).expect("known state") {
                    writeln!(
                        out,
                        "{},{},{},{},{action},{q},{}",
                        key.user,
                        key.ads_used,
                        key.organics_used,
                        key.page_index,
                        action == best
                    )?;
                }
            }
            out.flush()?;
            println!(
                "states {} iterations {} residual {:e} gamma {gamma}",
                oracle.len(),
                oracle.iterations,
                oracle.residual()
            );
            println!("wrote {}", path.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
