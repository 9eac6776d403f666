//! `fddlab`: run the distillation pipeline stage by stage over an artifact
//! directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fddlab::config::RunConfig;
use fddlab::eval::{compare, comparison_csv, parse_report};
use fddlab::fdd::Ablation;
use fddlab::numerics::fdt;
use fddlab::worldgen::instruction::EditParams;
use fddlab::worldgen::ppm::write_grid;
use fddlab::{pipeline, selftest, vocab, Error, Result};

#[derive(Parser)]
#[command(name = "fddlab", version, about = "Factorized diffusion distillation on a synthetic sprite world")]
struct Cli {
    /// `key = value` overrides of the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic datasets.
    GenData,
    /// Train the backbone on captioned frames.
    PretrainBackbone,
    /// Train the edit adapter with the backbone frozen.
    TrainEdit,
    /// Train the temporal layers with the backbone frozen.
    TrainVideo,
    /// Align the student on the unsupervised points.
    FddAlign {
        #[arg(long, default_value = "full")]
        preset: String,
    },
    /// Align under an ablation preset, then evaluate it.
    Ablate { preset: String },
    /// Score `oracle`, `identity`, `psi`, `eta` or an aligned preset.
    Evaluate {
        #[arg(long, default_value = "full")]
        label: String,
    },
    /// Per-metric means, deltas and win rates of run B over run A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the table here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Edit a clip (`.fdt`, `[F, 3, H, W]`) and dump PPM frames.
    Sample {
        #[arg(long)]
        video: PathBuf,
        /// e.g. "local blue", "add circle red", "style invert".
        #[arg(long)]
        instruction: String,
        /// Output caption, space separated vocabulary tokens.
        #[arg(long)]
        caption: String,
        #[arg(long, default_value = "full")]
        label: String,
    },
    /// Print the resolved configuration.
    ShowConfig,
    /// Run the built-in invariant checks.
    Selftest {
        /// Gradient checks per op.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact(_) => 2,
        Error::Config { .. } => 3,
        Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn report(label: &str, r: &fddlab::eval::MetricsReport) {
    println!("{label}:");
    print!("{}", r.summary());
}

fn sample(cfg: &RunConfig, root: &Path, label: &str, video: &Path, instruction: &str, caption: &str) -> Result<()> {
    let clip = fdt::read(video)?;
    let c_instruct = EditParams::parse(instruction)?.tokens();
    let c_out = vocab::parse(caption)?;
    let out = pipeline::sample(cfg, root, label, &clip, &c_out, &c_instruct)?;
    let dir = root.join("sample").join(label);
    std::fs::create_dir_all(&dir)?;
    for f in 0..out.shape()[0] {
        write_grid(&dir.join(format!("frame_{f:03}.ppm")), &[&out.slice0(f, 1)?], 4)?;
    }
    write_grid(&dir.join("grid.ppm"), &[&clip, &out], 4)?;
    fdt::write(&dir.join("output.fdt"), &out)?;
    println!("wrote {} frames to {}", out.shape()[0], dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    if let Cmd::Selftest { cases } = cli.cmd {
        let checks = selftest::run_all(cases)?;
        for c in &checks {
            println!("{c}");
        }
        return Ok(checks.iter().all(|c| c.pass));
    }
    if let Cmd::Compare { a, b, output } = &cli.cmd {
        let read = |p: &Path| -> Result<_> {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
            parse_report(&std::fs::read_to_string(p)?, p)
        };
        let table = comparison_csv(&compare(&read(a)?, &read(b)?)?);
        print!("{table}");
        if let Some(o) = output {
            std::fs::write(o, &table)?;
        }
        return Ok(true);
    }
    let cfg = load_config(cli)?;
    let root = cli.out.as_path();
    match &cli.cmd {
        Cmd::GenData => {
            pipeline::gen_data(&cfg, root)?;
        }
        Cmd::PretrainBackbone => {
            pipeline::pretrain_backbone(&cfg, root)?;
        }
        Cmd::TrainEdit => {
            pipeline::train_edit(&cfg, root)?;
        }
        Cmd::TrainVideo => {
            pipeline::train_video(&cfg, root)?;
        }
        Cmd::FddAlign { preset } => {
            let o = pipeline::fdd_align(&cfg, root, Ablation::parse(preset)?)?;
            println!("{preset}: {} iterations in {:.1}s", o.records.len(), o.seconds);
        }
        Cmd::Ablate { preset } => {
            let o = pipeline::fdd_align(&cfg, root, Ablation::parse(preset)?)?;
            println!("{preset}: {} iterations in {:.1}s", o.records.len(), o.seconds);
            report(preset, &pipeline::evaluate(&cfg, root, preset)?);
        }
        Cmd::Evaluate { label } => report(label, &pipeline::evaluate(&cfg, root, label)?),
        Cmd::Sample { video, instruction, caption, label } => sample(&cfg, root, label, video, instruction, caption)?,
        Cmd::ShowConfig => print!("{}", cfg.render()),
        Cmd::Selftest { .. } | Cmd::Compare { .. } => unreachable!(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
