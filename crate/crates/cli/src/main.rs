use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tbnet::pipeline::{synth_digits_dir, Config, Pipeline, Stage, KEYS};

#[derive(Parser)]
#[command(name = "tbnet", about = "Two-branch model protection pipeline", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every stage artifact
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim model
    TrainVictim,
    /// Build the two-branch model from the victim
    Init,
    /// Joint training with the sparsity penalty
    Transfer,
    /// Iterative two-branch channel pruning
    Prune,
    /// Roll back M_R, fine-tune M_T and write the REE/TEE pair
    Finalize,
    /// Copy and verify the REE/TEE pair
    Export {
        /// Destination directory; overrides `export.dir`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run split inference on test inputs and audit the traffic
    Simulate {
        /// Overrides `simulate.samples`
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Direct-use, fine-tune and TEE-only attacks
    Attack,
    /// Aggregate every stage report
    Report,
    /// Every stage in order
    All,
    /// Write synthetic digits as MNIST-named IDX files
    SynthDigits {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
    },
    /// List configuration keys and defaults
    Keys,
}

fn config(g: &Global) -> tbnet::Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for pair in &g.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = g.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> tbnet::Result<()> {
    let mut cfg = config(&cli.global)?;
    let stages = match cli.command {
        Command::Keys => {
            for (k, stage, d, doc) in KEYS {
                println!("{k} = {d}    # {doc} [{stage}]");
            }
            return Ok(());
        }
        Command::SynthDigits { out, train, test } => {
            let seed: u64 = cfg.get("seed")?;
            for p in synth_digits_dir(&out, train, test, seed)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Command::TrainVictim => vec![Stage::TrainVictim],
        Command::Init => vec![Stage::Init],
        Command::Transfer => vec![Stage::Transfer],
        Command::Prune => vec![Stage::Prune],
        Command::Finalize => vec![Stage::Finalize],
        Command::Export { out } => {
            if let Some(o) = out {
                cfg.set("export.dir", &o.to_string_lossy())?;
            }
            vec![Stage::Export]
        }
        Command::Simulate { samples } => {
            if let Some(n) = samples {
                cfg.set("simulate.samples", &n.to_string())?;
            }
            vec![Stage::Simulate]
        }
        Command::Attack => vec![Stage::Attack],
        Command::Report => vec![Stage::Report],
        Command::All => Stage::ALL.to_vec(),
    };
    let mut pipeline = Pipeline::new(cfg, &cli.global.workdir)?;
    for stage in stages {
        let out = pipeline.run(stage)?;
        for f in &out.files {
            eprintln!("wrote {}", f.display());
        }
        println!("{}", serde_json::to_string_pretty(&out.summary)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
