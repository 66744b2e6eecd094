use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shipnet::config::RunConfig;
use shipnet::data::{generate_synthetic, SynthSpec};
use shipnet::experiment::{
    compare_runs, eval_run, heatmap_run, prepare_data, prepare_out_dir, render_comparison, train_run, HeatmapRequest,
};
use shipnet::gradsweep::{gradcheck_sweep, render_sweep};
use shipnet::heatmap::HeatmapMethod;
use shipnet::train::EpochLog;
use shipnet::Error;

#[derive(Parser)]
#[command(name = "shipnet", version, about = "Ship classification with CBAM-attention residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file (`#` starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=15`; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing non-empty output directory
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic four-family ship corpus as PPM files
    GenSynth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the configured variant; checkpoints after every epoch
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Continue from a checkpoint inside --out (the directory may exist)
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of the configured dataset
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train baseline, cbam and enhanced on one shared split and seed
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Overlay spatial-gate or Grad-CAM maps on one image or a directory
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A .ppm file or a directory of them
        #[arg(long)]
        image: PathBuf,
        /// spatial-gate or gradcam
        #[arg(long, default_value = "spatial-gate")]
        method: HeatmapMethod,
        /// Stage 2..5 (default: last attention stage, or 5 for gradcam)
        #[arg(long)]
        stage: Option<usize>,
        /// Target class for gradcam (default: predicted)
        #[arg(long)]
        class: Option<usize>,
        /// Output .ppm for a single image, otherwise a directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every layer and attention block
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_epoch(v: shipnet::model::Variant, row: &EpochLog) {
    eprintln!(
        "[{v}] epoch {:>3}  lr {:.1e}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
        row.epoch, row.lr, row.train_loss, row.train_acc, row.val_loss, row.val_acc
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenSynth {
            classes,
            per_class,
            size,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                classes,
                per_class,
                size,
                seed,
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            prepare_out_dir(&out.out, out.force)?;
            let n = generate_synthetic(&spec, &out.out)?;
            println!("wrote {n} images to {}", out.out.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::load(config.config.as_deref(), &config.overrides)?;
            let model = cfg.model_config(None)?;
            match &resume {
                Some(_) => std::fs::create_dir_all(&out.out).map_err(|e| Error::io(&out.out, e))?,
                None => prepare_out_dir(&out.out, out.force)?,
            }
            let data = prepare_data(&cfg, model.input_size)?;
            let o = train_run(&cfg, cfg.variant, &data, &out.out, resume.as_deref(), print_epoch)?;
            print!("{}", o.report.render_table());
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = RunConfig::load(config.config.as_deref(), &config.overrides)?;
            prepare_out_dir(&out.out, out.force)?;
            print!("{}", eval_run(&cfg, &checkpoint, &out.out)?.render_table());
        }
        Command::Compare { config, out } => {
            let cfg = RunConfig::load(config.config.as_deref(), &config.overrides)?;
            prepare_out_dir(&out.out, out.force)?;
            let outcomes = compare_runs(&cfg, &out.out, print_epoch)?;
            for o in &outcomes {
                println!("{}\n{}", o.variant, o.report.render_table());
            }
            print!("{}", render_comparison(&outcomes));
        }
        Command::Heatmap {
            checkpoint,
            image,
            method,
            stage,
            class,
            out,
            force,
        } => {
            if out.exists() && !force {
                return Err(Error::Config(format!(
                    "output {} already exists; pass --force to overwrite it",
                    out.display()
                )));
            }
            let req = HeatmapRequest {
                checkpoint,
                input: image,
                method,
                stage,
                class,
                out,
            };
            for (path, map) in heatmap_run(&req)? {
                println!("{}\trange {:.4}", path.display(), map.range());
            }
        }
        Command::Gradcheck { seed } => {
            let rows = gradcheck_sweep(seed)?;
            print!("{}", render_sweep(&rows));
            if !rows.iter().all(|r| r.passed()) {
                return Err(Error::Backward("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors before anything is written
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
