use std::fmt::Display;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use riskview::pipeline::{run_episode, sweep_yaw, EpisodeConfig, Termination};
use riskview::risk::build_risk_field;
use riskview::scene::{load_scene, Lattice, Vec3};
use riskview::Error;

const EXIT_BLOCKED: u8 = 2;

#[derive(Parser)]
#[command(
    name = "riskview",
    version,
    about = "Risk-averse planning with next-best-view selection on splat maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its report and artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the risk field of a scene as CSV.
    Riskfield {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take lattice and epsilon from an episode config.
        #[arg(long, conflicts_with_all = ["spacing", "dims", "origin"])]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        spacing: f64,
        #[arg(long, value_parser = triple::<usize>, default_value = "33,33,33")]
        dims: [usize; 3],
        #[arg(long, value_parser = triple::<f64>, default_value = "0,0,0", allow_hyphen_values = true)]
        origin: [f64; 3],
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
    },
    /// Dense EIG-vs-yaw sweep at one lattice vertex for the initial estimate.
    SweepYaw {
        #[arg(long)]
        config: PathBuf,
        /// Vertex as `i,j,k`.
        #[arg(long, value_parser = triple::<usize>)]
        waypoint: [usize; 3],
        #[arg(long, default_value_t = 360)]
        samples: usize,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `a,b,c`.
fn triple<T: FromStr>(text: &str) -> Result<[T; 3], String>
where
    T::Err: Display,
{
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!(
            "expected three comma-separated values, got {text:?}"
        ));
    };
    let parse = |v: &str| v.parse::<T>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(a)?, parse(b)?, parse(c)?])
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = EpisodeConfig::load(&config)?;
            let Some(dir) = out.or_else(|| cfg.output_dir.clone()) else {
                bail!("no output directory: pass --out or set output_dir");
            };
            let episode = match run_episode(&cfg) {
                Ok(e) => e,
                Err(Error::Blocked(reason)) => {
                    eprintln!("blocked: {reason}");
                    return Ok(ExitCode::from(EXIT_BLOCKED));
                }
                Err(e) => return Err(e.into()),
            };
            episode.write_artifacts(&dir)?;
            let r = &episode.report;
            println!(
                "executed {:.3} m (baseline {:.3} m), min alpha {:.4} (baseline {:.4}), mean EIG gain {}",
                r.executed_length,
                r.baseline_length,
                r.executed_safety.min_alpha,
                r.baseline_safety.min_alpha,
                r.mean_eig_gain_percent.map_or("n/a".into(), |g| format!("{g:.1}%"))
            );
            if let Termination::Blocked { subgoal, reason } = &r.termination {
                eprintln!("blocked at subgoal {subgoal}: {reason}");
                return Ok(ExitCode::from(EXIT_BLOCKED));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Riskfield {
            scene,
            out,
            config,
            spacing,
            dims,
            origin,
            epsilon,
        } => {
            let scene = load_scene(&scene)?;
            let (lattice, epsilon) = match config {
                Some(path) => {
                    let cfg = EpisodeConfig::load(path)?;
                    (cfg.lattice.build()?, cfg.epsilon)
                }
                None => (Lattice::new(Vec3::from(origin), spacing, dims)?, epsilon),
            };
            build_risk_field(&scene, &lattice, epsilon)?.write_csv(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepYaw {
            config,
            waypoint,
            samples,
            out,
        } => {
            let cfg = EpisodeConfig::load(&config)?;
            let rows = sweep_yaw(&cfg, waypoint, samples)?;
            let mut text = String::from("yaw,eig\n");
            for (yaw, eig) in rows {
                text.push_str(&format!("{yaw},{eig}\n"));
            }
            match out {
                Some(path) => {
                    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?
                }
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
