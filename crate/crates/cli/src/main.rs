use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use notercnn_cli::{pipeline, report, CliError, ExperimentConfig, Layout, Overrides};

#[derive(Parser, Debug)]
#[command(name = "notercnn", version, about = "Training-mining experiments on synthetic desk scenes")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single rng seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Mining score threshold.
    #[arg(long = "theta-b", global = true)]
    theta_b: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the source and target datasets.
    GenData,
    /// Train (or reuse) the source detector and report its source mAP.
    TrainSource,
    /// Run the training-mining loop for every seed count and seed.
    Run,
    /// Mine the weak images with a trained checkpoint.
    Mine {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on the target validation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit charts and tables for every run under DIR (default: the output directory).
    Report { dir: Option<PathBuf> },
}

fn load_config(cli: &Cli) -> notercnn_cli::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        variant: cli.variant.clone(),
        iterations: cli.iterations,
        theta_b: cli.theta_b,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> notercnn_cli::Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(cfg.out_dir());
    match &cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, &layout)?;
            println!("datasets written under {}", layout.root.join("data").display());
        }
        Command::TrainSource => {
            for (seed, m) in pipeline::train_source(&cfg, &layout)? {
                println!("seed {seed}: source mAP@0.5 {:.4} mAP@[0.5:0.95] {:.4}", m.map_50, m.map_50_95);
            }
        }
        Command::Run => {
            for r in pipeline::run(&cfg, &layout)? {
                let last = r.record.iterations.last();
                println!(
                    "{} spc{} seed {}: final mAP@0.5 {:.4} -> {}",
                    r.variant,
                    r.seeds_per_category,
                    r.seed,
                    last.map_or(f64::NAN, |i| i.evaluation.map_50),
                    r.dir.display()
                );
            }
        }
        Command::Mine { checkpoint, output } => {
            let m = pipeline::mine(&cfg, &layout, checkpoint.as_deref(), output.as_deref())?;
            println!(
                "{} mined boxes, precision {:.4}, recall {:.4} -> {}",
                m.quality.mined_count,
                m.quality.precision,
                m.quality.recall,
                m.path.display()
            );
        }
        Command::Eval { checkpoint } => {
            let m = pipeline::eval(&cfg, &layout, checkpoint.as_deref())?;
            println!("mAP@0.5 {:.4} mAP@[0.5:0.95] {:.4}", m.map_50, m.map_50_95);
            for (c, (ap50, ap)) in &m.per_category {
                println!("  category {c}: AP@0.5 {ap50:.4} AP@[0.5:0.95] {ap:.4}");
            }
        }
        Command::Report { dir } => {
            let root = dir.clone().unwrap_or_else(|| layout.root.clone());
            let files = report::report(&root)?;
            println!("{} report files in {}", files.files.len(), Layout::new(&root).report_dir().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NOTERCNN_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &CliError) {
    eprintln!("notercnn: error[{}]: {}", e.kind(), e.one_line());
}
