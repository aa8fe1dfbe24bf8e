use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use unida::data::{generate_dataset, load_dataset, save_dataset};
use unida::experiment::{
    load_config, obtain_dataset, run_ablation, run_experiment, run_source_only, write_comparison,
    ExperimentConfig,
};
use unida::metrics::{evaluate, MetricsReport};
use unida::net::load_checkpoint;

#[derive(Parser)]
#[command(name = "unida", version, about = "Universal domain adaptation lab")]
struct Cli {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the dataset and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and write it to a directory.
    GenData {
        /// Target directory; defaults to the config's data_dir.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train the adapted model and evaluate it.
    Train,
    /// Train the source-only model and compare it with the adapted one.
    SourceOnly,
    /// Evaluate a checkpoint on the target test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the ablation ladder over the configured seeds.
    Ablate,
    /// Print the resolved config as JSON.
    ShowConfig,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(name: &str, r: &MetricsReport) {
    println!("{name}: ACC {:.2}  AUROC {:.4}", r.acc, r.auroc);
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = resolve_config(&cli)?;

    match &cli.command {
        Command::GenData { dir } => {
            let dir = dir
                .clone()
                .or_else(|| cfg.data_dir.clone())
                .context("no target directory: pass --dir or set data_dir")?;
            let ds = generate_dataset(&cfg.dataset)?;
            let manifest = save_dataset(&dir, &ds)?;
            for split in &manifest.splits {
                println!("{}: {} images", split.name, split.count);
            }
        }
        Command::Train => {
            let summary = run_experiment(&cfg)?;
            for stage in [1, 2] {
                if let Some(r) = summary.stage_report(stage) {
                    print_report(&format!("end of stage {stage}"), r);
                }
            }
            print_report("final", &summary.report);
            println!("artifacts in {}", summary.dir.display());
        }
        Command::SourceOnly => {
            let source = run_source_only(&cfg)?;
            let adapted_metrics = cfg.run_dir().join("metrics.json");
            let adapted = if adapted_metrics.exists() {
                info!("using existing adapted run in {}", cfg.run_dir().display());
                MetricsReport::read_json(&adapted_metrics)?
            } else {
                run_experiment(&cfg)?.report
            };
            let cmp = write_comparison(&cfg.run_dir(), &adapted, &source.report)?;
            print!("{}", cmp.to_csv());
        }
        Command::Eval { checkpoint, data } => {
            let (params, meta) = load_checkpoint(checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let ds = match data {
                Some(dir) => load_dataset(dir)?,
                None => obtain_dataset(&cfg)?,
            };
            let evaluation = evaluate(&params, &ds.target_test, ds.spec.crop_side, &cfg.eval)?;
            print_report(&format!("stage {} step {}", meta.stage, meta.step), &evaluation.report);
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                evaluation.report.write_json(&out.join("metrics.json"))?;
                std::fs::write(out.join("scores.csv"), evaluation.scores_csv())?;
            }
        }
        Command::Ablate => {
            let summary = run_ablation(&cfg, !cli.single_thread)?;
            print!("{}", summary.to_csv());
        }
        Command::ShowConfig => print!("{}", cfg.to_json()?),
    }
    Ok(())
}
