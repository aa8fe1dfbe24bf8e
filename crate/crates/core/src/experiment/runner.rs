use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::data::{generate_dataset, load_dataset, save_dataset, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricsReport};
use crate::net::{save_checkpoint, ModelParams};
use crate::trainer::{train_full, Checkpoint, TrainData, TrainLog, TrainObserver};

/// Loads the dataset cached in `data_dir`, or generates it (and fills the
/// cache when a directory is configured).
pub fn obtain_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) if dir.join("manifest.json").exists() => {
            let ds = load_dataset(dir)?;
            if ds.spec != cfg.dataset {
                return Err(Error::Config(format!(
                    "data_dir {}: cached dataset was generated from a different dataset spec",
                    dir.display()
                )));
            }
            Ok(ds)
        }
        Some(dir) => {
            let ds = generate_dataset(&cfg.dataset)?;
            save_dataset(dir, &ds)?;
            Ok(ds)
        }
        None => generate_dataset(&cfg.dataset),
    }
}

/// What a finished run leaves behind, besides its files.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub log: TrainLog,
    /// Directory of the last stage-end checkpoint.
    pub final_checkpoint: PathBuf,
    /// SHA-256 of the final parameter file.
    pub checkpoint_sha256: String,
}

impl RunSummary {
    /// Report taken at the end of `stage`, if that stage ran.
    pub fn stage_report(&self, stage: usize) -> Option<&MetricsReport> {
        self.log.stage_end_report(stage)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

pub(crate) fn sha256_file(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

pub(crate) fn stage_checkpoint_dir(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage{stage}_end"))
}

struct RunObserver<'a> {
    run_dir: &'a Path,
    test: &'a [LabeledImage],
    crop_side: usize,
    eval: EvalOptions,
    seed: u64,
}

impl TrainObserver for RunObserver<'_> {
    fn observe(&mut self, at: &Checkpoint<'_>) -> Result<Option<MetricsReport>> {
        let dir = if at.stage_end {
            stage_checkpoint_dir(self.run_dir, at.stage)
        } else {
            self.run_dir.join("checkpoints").join(format!("step_{:06}", at.step))
        };
        save_checkpoint(&dir, at.params, self.seed, at.stage, at.step)?;
        let report = evaluate(at.params, self.test, self.crop_side, &self.eval)?.report;
        info!(
            "stage {} step {}: acc {:.2} auroc {:.4}",
            at.stage, at.step, report.acc, report.auroc
        );
        Ok(Some(report))
    }
}

fn execute(cfg: &ExperimentConfig, dir: &Path, source_only: bool) -> Result<RunSummary> {
    for w in cfg.validate()? {
        warn!("{w}");
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.resolved.json"), cfg.to_json()?)?;

    let ds = obtain_dataset(cfg)?;
    let data = if source_only {
        TrainData::source_only(&ds.source)
    } else {
        TrainData::adapted(&ds.source, &ds.target_train)
    };
    let crop_side = cfg.dataset.crop_side;
    let dims = cfg
        .train
        .backbone
        .dims(crop_side * crop_side, cfg.dataset.num_source_classes());
    let mut observer = RunObserver {
        run_dir: dir,
        test: &ds.target_test,
        crop_side,
        eval: cfg.eval,
        seed: cfg.train.seed,
    };
    let mut log = TrainLog::default();
    let trained = train_full(&cfg.train, dims, crop_side, &data, &mut observer, &mut log);
    fs::write(dir.join("train_log.csv"), log.to_csv())?;
    write_json(&dir.join("snapshots.json"), &log.snapshots)?;
    let params: ModelParams = trained?;
    if source_only && data.target_reads() != 0 {
        return Err(Error::Degenerate("source-only run read target data".into()));
    }

    let evaluation = evaluate(&params, &ds.target_test, crop_side, &cfg.eval)?;
    fs::write(dir.join("scores.csv"), evaluation.scores_csv())?;
    fs::write(
        dir.join("metrics.csv"),
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, evaluation.report.csv_row()),
    )?;
    let last_stage = if cfg.train.two_stage { 2 } else { 1 };
    let final_checkpoint = stage_checkpoint_dir(dir, last_stage);
    let checkpoint_sha256 = sha256_file(&final_checkpoint.join("params.f64le"))?;
    // metrics.json is written last and marks the run as complete
    evaluation.report.write_json(&dir.join("metrics.json"))?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        report: evaluation.report,
        log,
        final_checkpoint,
        checkpoint_sha256,
    })
}

/// Trains and evaluates the adapted model into `<output_dir>/<run_id>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    execute(cfg, &cfg.run_dir(), false)
}

/// Trains on source data alone, with no entropy or domain terms, into
/// `<output_dir>/<run_id>/source_only/`.
pub fn run_source_only(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let mut so = cfg.clone();
    for stage in [&mut so.train.stage1, &mut so.train.stage2] {
        stage.use_discriminator = false;
        stage.weights.entropy = 0.0;
        stage.weights.domain = 0.0;
    }
    execute(&so, &cfg.run_dir().join("source_only"), true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub adapted: MetricsReport,
    pub source_only: MetricsReport,
}

impl Comparison {
    pub const CSV_HEADER: &'static str = "model,acc,auroc";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\nadapted,{},{}\nsource_only,{},{}\n",
            Self::CSV_HEADER,
            self.adapted.acc,
            self.adapted.auroc,
            self.source_only.acc,
            self.source_only.auroc
        )
    }
}

/// Writes `comparison.csv` and `comparison.json` into `dir`.
pub fn write_comparison(dir: &Path, adapted: &MetricsReport, source_only: &MetricsReport) -> Result<Comparison> {
    let cmp = Comparison {
        adapted: adapted.clone(),
        source_only: source_only.clone(),
    };
    fs::write(dir.join("comparison.csv"), cmp.to_csv())?;
    write_json(&dir.join("comparison.json"), &cmp)?;
    Ok(cmp)
}
