use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nvdress_cli::{plot_file, resolve_out_dir, run, CliError, ExperimentConfig, ExperimentKind, Overrides, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "nvdress", version, about = "Dressed-state NV-centre experiments from TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Override the noise seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the trajectory count.
        #[arg(long)]
        n_traj: Option<usize>,
        /// Output directory; defaults to the config's `out_dir`, then
        /// `$NVDRESS_OUT_DIR/<config stem>`, then `nvdress-out/<config stem>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Render a CSV written by `run` as SVG.
    Plot { data: PathBuf, plotspec: PathBuf },
    /// List the experiment kinds a config can name.
    ListExperiments,
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            seed,
            n_traj,
            out_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            Overrides { seed, n_traj }.apply(&mut cfg);
            let env = std::env::var_os(OUT_DIR_ENV);
            let dir = resolve_out_dir(out_dir.as_deref(), &cfg, &config, env.as_deref());
            let manifest = run(&cfg, &dir)?;
            println!(
                "{} -> {} ({} files, {:.1} s, config {})",
                manifest.experiment,
                dir.display(),
                manifest.outputs.len(),
                manifest.wall_clock_seconds,
                &manifest.config_sha256[..12]
            );
        }
        Command::Plot { data, plotspec } => {
            let out = plot_file(&data, &plotspec)?;
            println!("{}", out.display());
        }
        Command::ListExperiments => {
            for k in ExperimentKind::ALL {
                println!("{:<22} {}", k.name(), k.summary());
            }
        }
    }
    Ok(())
}
