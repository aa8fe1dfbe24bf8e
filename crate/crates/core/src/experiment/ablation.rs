use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::runner::{obtain_dataset, run_experiment, sha256_file, stage_checkpoint_dir, write_json};
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::net::load_checkpoint;
use crate::trainer::Backbone;

/// Cumulative ladder steps; each enables one component on top of the
/// enabled steps before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rung {
    /// Compact extractor, no augmentation, one negative, no discriminator,
    /// single stage, center crop.
    Baseline,
    Augmentation,
    StandardBackbone,
    NearNegatives,
    Discriminator,
    TwoStage,
    FiveCrop,
}

impl Rung {
    pub const LADDER: [Rung; 7] = [
        Rung::Baseline,
        Rung::Augmentation,
        Rung::StandardBackbone,
        Rung::NearNegatives,
        Rung::Discriminator,
        Rung::TwoStage,
        Rung::FiveCrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Baseline => "baseline",
            Rung::Augmentation => "augmentation",
            Rung::StandardBackbone => "standard_backbone",
            Rung::NearNegatives => "near_negatives",
            Rung::Discriminator => "discriminator",
            Rung::TwoStage => "two_stage",
            Rung::FiveCrop => "five_crop",
        }
    }

    /// `base` with every component off, then the components of `enabled`
    /// switched on. Near negatives restore `base`'s top-k.
    pub fn apply(base: &ExperimentConfig, enabled: &[Rung]) -> ExperimentConfig {
        let mut c = base.clone();
        c.train.backbone = Backbone::Compact;
        c.train.augment_source = false;
        c.train.stage1.top_k = 1;
        c.train.stage2.top_k = 1;
        c.train.stage1.use_discriminator = false;
        c.train.two_stage = false;
        c.eval.use_five_crop = false;
        for rung in enabled {
            match rung {
                Rung::Baseline => {}
                Rung::Augmentation => c.train.augment_source = true,
                Rung::StandardBackbone => c.train.backbone = Backbone::Standard,
                Rung::NearNegatives => {
                    c.train.stage1.top_k = base.train.stage1.top_k;
                    c.train.stage2.top_k = base.train.stage2.top_k;
                }
                Rung::Discriminator => c.train.stage1.use_discriminator = true,
                Rung::TwoStage => c.train.two_stage = true,
                Rung::FiveCrop => c.eval.use_five_crop = true,
            }
        }
        c
    }
}

pub(crate) fn check_ladder(rungs: &[Rung]) -> Result<()> {
    if rungs.is_empty() {
        return Err(Error::Config("ablation.rungs: must not be empty".into()));
    }
    if rungs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "ablation.rungs: must follow ladder order without repeats".into(),
        ));
    }
    Ok(())
}

pub const ABLATION_CSV_HEADER: &str = "config_name,acc_mean,acc_std,auroc_mean,auroc_std,seeds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub acc: f64,
    pub auroc: f64,
    pub checkpoint_sha256: String,
    /// Trained by an earlier rung and evaluated here with new options.
    pub reused_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_name: String,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub seeds: usize,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.config_name, r.acc_mean, r.acc_std, r.auroc_mean, r.auroc_std, r.seeds
            );
        }
        out
    }
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn seed_config(rung_cfg: &ExperimentConfig, rung_dir: &Path, seed: u64) -> ExperimentConfig {
    let mut c = rung_cfg.clone().with_seed(seed);
    c.output_dir = rung_dir.to_path_buf();
    c.run_id = format!("seed_{seed}");
    c.data_dir = rung_cfg.data_dir.as_ref().map(|d| d.join(format!("seed_{seed}")));
    c
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

/// Evaluates the predecessor's final checkpoint under `cfg`'s eval options,
/// copying its training artifacts verbatim.
fn reuse_run(cfg: &ExperimentConfig, from: &Path) -> Result<()> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved.json"), cfg.to_json()?)?;
    copy_dir(&from.join("checkpoints"), &dir.join("checkpoints"))?;
    for file in ["train_log.csv", "snapshots.json"] {
        fs::copy(from.join(file), dir.join(file))?;
    }
    let last_stage = if cfg.train.two_stage { 2 } else { 1 };
    let (params, _) = load_checkpoint(&stage_checkpoint_dir(&dir, last_stage))?;
    let ds = obtain_dataset(cfg)?;
    let evaluation = evaluate(&params, &ds.target_test, cfg.dataset.crop_side, &cfg.eval)?;
    fs::write(dir.join("scores.csv"), evaluation.scores_csv())?;
    fs::write(
        dir.join("metrics.csv"),
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, evaluation.report.csv_row()),
    )?;
    evaluation.report.write_json(&dir.join("metrics.json"))?;
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, reuse_from: Option<&PathBuf>) -> Result<SeedResult> {
    let dir = cfg.run_dir();
    let done = dir.join("metrics.json");
    if !done.exists() {
        match reuse_from {
            Some(from) => reuse_run(cfg, from)?,
            None => {
                run_experiment(cfg)?;
            }
        }
    } else {
        info!("{} already complete", dir.display());
    }
    let report = MetricsReport::read_json(&done)?;
    let last_stage = if cfg.train.two_stage { 2 } else { 1 };
    Ok(SeedResult {
        seed: cfg.train.seed,
        acc: report.acc,
        auroc: report.auroc,
        checkpoint_sha256: sha256_file(&stage_checkpoint_dir(&dir, last_stage).join("params.f64le"))?,
        reused_from: reuse_from.map(|p| p.display().to_string()),
    })
}

/// Runs every enabled rung for every seed under `<run_dir>/ablation/` and
/// writes `ablation.csv` and `ablation.json` into the run directory.
///
/// A seed directory holding `metrics.json` is complete and is read back
/// instead of rerun. A rung whose dataset and training settings equal its
/// predecessor's reuses the predecessor's checkpoints.
pub fn run_ablation(base: &ExperimentConfig, parallel: bool) -> Result<AblationSummary> {
    base.validate()?;
    let root = base.run_dir();
    let ablation_dir = root.join("ablation");
    fs::create_dir_all(&ablation_dir)?;

    let mut rows = Vec::new();
    let mut previous: Option<(ExperimentConfig, PathBuf)> = None;
    for (i, &rung) in base.ablation.rungs.iter().enumerate() {
        let rung_cfg = Rung::apply(base, &base.ablation.rungs[..=i]);
        let rung_dir = ablation_dir.join(rung.name());
        let reuse = previous.as_ref().and_then(|(prev, dir)| {
            (prev.dataset == rung_cfg.dataset && prev.train == rung_cfg.train).then_some(dir.clone())
        });
        info!("rung {} ({} seeds)", rung.name(), base.ablation.seeds.len());

        let job = |&seed: &u64| {
            let cfg = seed_config(&rung_cfg, &rung_dir, seed);
            let from = reuse.as_ref().map(|d| d.join(format!("seed_{seed}")));
            run_seed(&cfg, from.as_ref())
        };
        let per_seed: Vec<SeedResult> = if parallel {
            base.ablation.seeds.par_iter().map(job).collect::<Result<_>>()?
        } else {
            base.ablation.seeds.iter().map(job).collect::<Result<_>>()?
        };

        let accs: Vec<f64> = per_seed.iter().map(|s| s.acc).collect();
        let aurocs: Vec<f64> = per_seed.iter().map(|s| s.auroc).collect();
        let (acc_mean, acc_std) = mean_std(&accs);
        let (auroc_mean, auroc_std) = mean_std(&aurocs);
        rows.push(AblationRow {
            config_name: rung.name().to_string(),
            acc_mean,
            acc_std,
            auroc_mean,
            auroc_std,
            seeds: per_seed.len(),
            per_seed,
        });
        previous = Some((rung_cfg, rung_dir));
    }

    let summary = AblationSummary { rows };
    fs::write(root.join("ablation.csv"), summary.to_csv())?;
    write_json(&root.join("ablation.json"), &summary)?;
    Ok(summary)
}
