use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use chunkft::checks::{run_preset, PRESETS};
use chunkft::config::validate_config;
use chunkft::harness;

/// Rotating chunk-local full-parameter optimization experiments.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset; see --list.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory for traces, summary and checkpoints.
    #[arg(long, env = "CHUNKFT_OUT_DIR")]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs every preset and exits nonzero if any check fails.
    #[arg(long)]
    check: bool,
    /// Lists presets.
    #[arg(long)]
    list: bool,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> chunkft::Result<bool> {
    if cli.list {
        for p in PRESETS {
            println!("{:<22} {}", p.name, p.description);
        }
        return Ok(true);
    }
    let seed = cli.seed.unwrap_or(0);
    if cli.check {
        let mut ok = true;
        for p in PRESETS {
            let r = run_preset(p.name, cli.out.as_deref(), seed)?;
            println!("{}", r.line());
            ok &= r.passed;
        }
        return Ok(ok);
    }
    if let Some(name) = &cli.preset {
        let r = run_preset(name, cli.out.as_deref(), seed)?;
        println!("{}", r.line());
        return Ok(r.passed);
    }
    let Some(path) = &cli.config else {
        eprintln!("nothing to do: pass --config, --preset, --check or --list");
        return Ok(false);
    };
    let text = std::fs::read_to_string(path).map_err(|e| chunkft::Error::Io { context: path.clone(), source: e })?;
    let mut cfg = validate_config(&text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("chunkft-out"));
    let art = harness::run(&cfg, &out)?;
    print!("{}", art.summary.to_text());
    log::info!("artifacts written to {}", out.display());
    Ok(true)
}
