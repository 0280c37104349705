//! `cmgan`: training, mask sampling, inpainting, feature dumps and the verification suite.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 verification failure,
//! 3 numerical failure.

mod config;
mod infer;
mod masks;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "cmgan", version, about = "Cascaded-modulation inpainting GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Total step count, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample object-aware masks and write stats.json.
    SampleMasks {
        /// Directory of instance label PNGs (8- or 16-bit gray).
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the hole of one image.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// White (above mid-gray) marks the hole.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-scale encoder, global and spatial feature magnitudes.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the property and oracle suite.
    Verify {
        /// Run only checks whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// List matching checks without running them.
        #[arg(long)]
        list: bool,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train { config, steps, resume } => {
            train::run(&train::TrainArgs { config, steps, resume })?;
        }
        Command::SampleMasks {
            instances,
            config,
            count,
            out,
        } => {
            let stats = masks::run(&masks::SampleArgs {
                instances,
                config,
                count,
                out,
            })?;
            let f = &stats.type_frequencies;
            println!(
                "{} masks: free-form {:.4}, object {:.4}, rect {:.4}; exclusion violations {}",
                stats.count, f.free_form, f.object, f.rect, stats.exclusion_violations
            );
        }
        Command::Inpaint {
            ckpt,
            image,
            mask,
            out,
            seed,
        } => infer::inpaint(&infer::InferArgs {
            ckpt,
            image,
            mask,
            out,
            seed,
        })?,
        Command::DumpFeatures {
            ckpt,
            image,
            mask,
            out,
            seed,
        } => {
            let report = infer::dump_features(&infer::InferArgs {
                ckpt,
                image,
                mask,
                out,
                seed,
            })?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |g| format!("{g:.3}"));
            for s in &report.scales {
                println!(
                    "scale {}: hole/visible gap encoder {} global {} spatial {}",
                    s.scale,
                    fmt(s.encoder.relative_gap),
                    fmt(s.global.relative_gap),
                    fmt(s.spatial.relative_gap)
                );
            }
        }
        Command::Verify { filter, json, list } => {
            if list {
                for c in cmgan::verify::select(filter.as_deref()) {
                    println!("{}  {}", c.name, c.description);
                }
                return Ok(0);
            }
            let report = cmgan::verify::run(filter.as_deref(), |r| {
                eprintln!("{} {} ({:.2}s)", if r.passed { "pass" } else { "FAIL" }, r.name, r.seconds);
            });
            println!("{report}");
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            if report.results.is_empty() {
                eprintln!("no checks match {:?}", filter.unwrap_or_default());
                return Ok(EXIT_USAGE);
            }
            if !report.all_passed() {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(0)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<cmgan::Error>() {
        Some(cmgan::Error::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
