//! tetraforge: extract, colorize, edit, and render neural-implicit surfaces.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 optimization abort.
//! Progress goes to stderr as `key=value` lines; each command prints one
//! machine-readable summary JSON object on stdout.

mod commands;
mod config;
mod fail;
mod meshio;
mod scene;

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::fail::{CliResult, Fail};

#[derive(Parser)]
#[command(
    name = "tetraforge",
    version,
    about = "Mesh-based editing of neural implicit density/radiance fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// March the configured field and write the surface as OBJ.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bake per-vertex colors for an existing mesh; writes a colored OBJ and
    /// a visibility stats sidecar.
    Colorize {
        #[arg(long)]
        config: PathBuf,
        /// Mesh to color (OBJ or ascii PLY).
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the density weights so the extracted surface matches the target
    /// mesh.
    EditGeom {
        #[arg(long)]
        config: PathBuf,
        /// Edited target mesh (OBJ or ascii PLY).
        #[arg(long)]
        target: PathBuf,
        /// Input weights; falls back to scene.checkpoint, else fresh nets.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output weights.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the radiance weights so baked vertex colors match the repainted
    /// target.
    EditColor {
        #[arg(long)]
        config: PathBuf,
        /// Repainted colored mesh (OBJ with `v x y z r g b`, or ascii PLY).
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the field to PNG, optionally through a source->target warp.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Render the deformed surface: source and target meshes of equal
        /// topology.
        #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
        warp: Option<Vec<PathBuf>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Worker cap from TETRAFORGE_THREADS. The pipeline itself is sequential, so
/// the effective count is min(cap, 1); the variable is still validated.
fn effective_threads() -> CliResult<usize> {
    match env::var("TETRAFORGE_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => {
            let cap: usize = s
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    Fail::usage(format!(
                        "TETRAFORGE_THREADS must be a positive integer, got {s:?}"
                    ))
                })?;
            Ok(cap.min(1))
        }
    }
}

fn load(config: &PathBuf, seed: Option<u64>) -> CliResult<Config> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let threads = effective_threads()?;
    eprintln!("threads={threads}");
    match cli.command {
        Command::Extract { config, seed, out } => {
            commands::cmd_extract(&load(&config, seed)?, &out)
        }
        Command::Colorize {
            config,
            mesh,
            seed,
            out,
        } => commands::cmd_colorize(&load(&config, seed)?, &mesh, &out),
        Command::EditGeom {
            config,
            target,
            ckpt,
            seed,
            out,
        } => commands::cmd_edit_geom(&load(&config, seed)?, &target, ckpt.as_deref(), &out),
        Command::EditColor {
            config,
            target,
            ckpt,
            seed,
            out,
        } => commands::cmd_edit_color(&load(&config, seed)?, &target, ckpt.as_deref(), &out),
        Command::Render {
            config,
            ckpt,
            warp,
            seed,
            out,
        } => {
            let warp_pair = match &warp {
                None => None,
                Some(w) if w.len() == 2 => Some((w[0].as_path(), w[1].as_path())),
                Some(_) => {
                    return Err(Fail::usage("--warp takes exactly two mesh paths"));
                }
            };
            commands::cmd_render(&load(&config, seed)?, ckpt.as_deref(), warp_pair, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code as u8)
        }
    }
}
