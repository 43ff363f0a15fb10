use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdnet::commands::{self, parse_size, ThresholdSpec, TrainOverrides};
use hdnet::formats::write_json;
use hdnet::Result;

/// Crowd counting with hierarchically decoupled density estimation.
///
/// Exit codes: 0 success, 1 other failure, 2 invalid config or arguments,
/// 3 missing input file, 4 training diverged.
#[derive(Parser)]
#[command(name = "hdnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with point annotations.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        scenes: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        /// Seed of the first scene; scene i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build density and level-mask targets for a dataset directory.
    MakeGt {
        #[arg(long)]
        data: PathBuf,
        /// Gaussian standard deviation in pixels.
        #[arg(long, default_value_t = 15.0)]
        sigma: f64,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// `auto` or a comma-separated ascending list of levels - 1 values.
        #[arg(long, default_value = "auto")]
        thresholds: ThresholdSpec,
        /// Pooled cells below this count are background.
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Train from a JSON config. Flags override values from the file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset directory (MAE and root-mean-squared error).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the metrics here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation variants described by a suite file.
    Ablate {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the count of one image; the count is the last line of output.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write per-head maps, soft masks, masked maps and the final map as PNGs.
        #[arg(long)]
        dump_intermediates: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, scenes, size: (h, w), seed } => {
            let m = commands::gen_data(&out, scenes, h, w, seed)?;
            println!("{} files, tree sha256 {}", m.artifacts.len(), m.tree_sha256);
        }
        Command::MakeGt { data, sigma, levels, thresholds, epsilon } => {
            let cfg = commands::make_gt(&data, sigma, levels, &thresholds, epsilon)?;
            println!("level thresholds {:?}", cfg.level_thresholds);
        }
        Command::Train { config, out, seed, epochs, workers } => {
            let r = commands::train(&config, &out, &TrainOverrides { seed, epochs, workers })?;
            if let Some(m) = r.state.best_val_mae {
                println!("best val mae {m:.6} at epoch {}", r.state.checkpoint_epoch.unwrap_or(0));
            }
            println!("checkpoint {}", out.join("checkpoint.bin").display());
        }
        Command::Eval { checkpoint, data, out } => {
            let m = commands::eval(&checkpoint, &data)?;
            match out {
                Some(p) => {
                    write_json(&p, &m)?;
                    println!("n {} mae {} mse {}", m.record.n, m.record.mae, m.record.mse);
                }
                None => println!("{}", serde_json::to_string_pretty(&m).expect("metrics serialize")),
            }
        }
        Command::Ablate { suite, out } => {
            let report = commands::ablate(&suite, &out)?;
            print!("{}", hdnet_core::ablation::render_table(&report));
        }
        Command::Infer { checkpoint, image, dump_intermediates, out } => {
            if dump_intermediates && out.is_none() {
                return Err(hdnet::Error::Config {
                    file: "<arguments>".into(),
                    field: "--out".into(),
                    message: "--dump-intermediates needs an output directory".into(),
                });
            }
            let r = commands::infer(&checkpoint, &image, out.as_deref(), dump_intermediates)?;
            for f in &r.files {
                println!("wrote {f}");
            }
            println!("{}", r.count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
