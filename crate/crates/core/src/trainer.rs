//! Two-stage optimization.
//!
//! Stage 1 trains everything with the adaptive optimizer, including the
//! domain discriminator behind gradient reversal. Stage 2 drops the
//! discriminator from the loss and the optimized set and switches to
//! momentum SGD with a much larger open-head learning rate.

use std::cell::Cell;
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, make_source_batch, Batch, BatchOptions, LabeledImage};
use crate::error::{Error, Result};
use crate::losses::{
    closed_set_ce_grad, domain_adversarial_grad, open_entropy_grad, ova_loss_topk_grad,
    unknown_weight, LossBreakdown, LossWeights,
};
use crate::metrics::MetricsReport;
use crate::net::{
    closed_backward, closed_forward, disc_backward, disc_forward, extractor_backward,
    extractor_forward, open_backward, open_forward, scores_from_row, stack_images, GradReversal,
    ModelParams, NetDims, ParamGroup,
};
use crate::optim::{AdamWConfig, MomentumConfig, Optimizer, OptimizerKind};

/// Linear warmup over `ceil(warmup_fraction * total)` steps, then cosine
/// decay to zero at `total_steps` over the remaining span.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let span = (total_steps - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    /// Open head and (stage 1) discriminator.
    pub lr_heads: f64,
    /// Extractor and closed head.
    pub lr_backbone: f64,
    pub warmup_fraction: f64,
    pub optimizer: OptimizerKind,
    pub use_discriminator: bool,
    pub weights: LossWeights,
    pub top_k: usize,
}

impl StageConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{name}.{field}: {why}")));
        if self.steps == 0 {
            return bad("steps", "must be >= 1".into());
        }
        for (field, lr) in [("lr_heads", self.lr_heads), ("lr_backbone", self.lr_backbone)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(field, format!("must be > 0, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", format!("must be in [0, 1), got {}", self.warmup_fraction));
        }
        if self.top_k == 0 {
            return bad("top_k", "must be >= 1".into());
        }
        let w = self.weights;
        for (field, v) in [("weights.ova", w.ova), ("weights.entropy", w.entropy), ("weights.domain", w.domain)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::OpenHead | ParamGroup::Discriminator => self.lr_heads,
            ParamGroup::Extractor | ParamGroup::ClosedHead => self.lr_backbone,
        }
    }
}

/// Extractor width preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// 64 → 32 hidden units.
    Compact,
    /// 256 → 128 hidden units.
    Standard,
}

impl Backbone {
    pub fn dims(self, input: usize, classes: usize) -> NetDims {
        let standard = NetDims::standard(input, classes);
        match self {
            Backbone::Standard => standard,
            Backbone::Compact => NetDims {
                hidden1: 64,
                hidden2: 32,
                ..standard
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// When false only stage 1 runs.
    pub two_stage: bool,
    /// Items per domain per step.
    pub batch_size: usize,
    pub grl: GradReversal,
    pub seed: u64,
    /// Observer cadence in global steps; 0 means stage ends only.
    pub eval_every: usize,
    pub augment_source: bool,
    /// Weight target samples by `1 - w^t` in the domain loss instead of `w^t`.
    pub invert_wt: bool,
    pub grad_clip_norm: Option<f64>,
    pub adamw: AdamWConfig,
    pub momentum: MomentumConfig,
    pub backbone: Backbone,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Defaults sized for a CPU run on the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            stage1: StageConfig {
                steps: 2000,
                lr_heads: 2e-3,
                lr_backbone: 1e-3,
                warmup_fraction: 0.05,
                optimizer: OptimizerKind::Adaptive,
                use_discriminator: true,
                weights: LossWeights::default(),
                top_k: 3,
            },
            stage2: StageConfig {
                steps: 600,
                lr_heads: 5e-2,
                lr_backbone: 2e-3,
                warmup_fraction: 0.05,
                optimizer: OptimizerKind::Momentum,
                use_discriminator: false,
                weights: LossWeights::default(),
                top_k: 3,
            },
            two_stage: true,
            batch_size: 32,
            // at 1.0 the small extractor collapses the target features
            grl: GradReversal { lambda: 0.1 },
            seed: 0,
            eval_every: 500,
            augment_source: true,
            invert_wt: false,
            grad_clip_norm: Some(5.0),
            adamw: AdamWConfig::default(),
            momentum: MomentumConfig::default(),
            backbone: Backbone::Standard,
        }
    }

    /// Step counts, learning rates, batch and top-k at the original
    /// ImageNet-scale settings.
    pub fn full_scale() -> Self {
        let mut cfg = Self::desk();
        cfg.stage1.steps = 30_000;
        cfg.stage1.lr_heads = 8.0e-6;
        cfg.stage1.lr_backbone = 4.0e-6;
        cfg.stage1.top_k = 300;
        cfg.stage2.steps = 8_000;
        cfg.stage2.lr_heads = 1.0e-3;
        cfg.stage2.lr_backbone = 8.0e-6;
        cfg.stage2.top_k = 300;
        cfg.batch_size = 64;
        cfg.grl = GradReversal::default();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate("train.stage1")?;
        self.stage2.validate("train.stage2")?;
        if self.stage2.use_discriminator {
            return Err(Error::Config(
                "train.stage2.use_discriminator: the discriminator is removed in stage 2".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size: must be >= 1".into()));
        }
        if !(self.grl.lambda.is_finite() && self.grl.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "train.grl.lambda: must be finite and >= 0, got {}",
                self.grl.lambda
            )));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("train.grad_clip_norm: must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<(usize, &StageConfig)> {
        let mut out = vec![(1, &self.stage1)];
        if self.two_stage {
            out.push((2, &self.stage2));
        }
        out
    }

    pub fn total_steps(&self) -> usize {
        self.stages().iter().map(|(_, s)| s.steps).sum()
    }
}

/// How the discriminator's feature gradient reaches the extractor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMode {
    /// Training: multiplied by `-lambda`.
    Reversed(GradReversal),
    /// The true gradient of the reported total loss.
    Plain,
}

fn add_pair_grads(row: &mut ndarray::ArrayViewMut1<f64>, grads: &[[f64; 2]], scale: f64) {
    for (j, [dp, dn]) in grads.iter().enumerate() {
        row[2 * j] += scale * dp;
        row[2 * j + 1] += scale * dn;
    }
}

/// Loss breakdown on `batch` and the gradient used for the update.
///
/// Source items contribute closed-set cross-entropy and the top-k one-vs-all
/// loss; target items contribute the mean binary entropy and, when the stage
/// uses the discriminator, the unknown-weighted domain loss.
pub fn objective(
    params: &ModelParams,
    batch: &Batch,
    stage: &StageConfig,
    mode: GradMode,
    invert_wt: bool,
) -> Result<(LossBreakdown, ModelParams)> {
    objective_impl(params, batch, stage, mode, TargetWeights::Computed { invert: invert_wt })
}

/// [`objective`] with the per-target domain weights supplied instead of read
/// from the open head. Since the weights are constants under
/// differentiation, this is the function whose exact gradient `objective`
/// returns in [`GradMode::Plain`].
pub fn objective_with_target_weights(
    params: &ModelParams,
    batch: &Batch,
    stage: &StageConfig,
    mode: GradMode,
    target_weights: &[f64],
) -> Result<(LossBreakdown, ModelParams)> {
    if target_weights.len() != batch.target.len() {
        return Err(Error::LengthMismatch {
            left: target_weights.len(),
            right: batch.target.len(),
        });
    }
    objective_impl(params, batch, stage, mode, TargetWeights::Given(target_weights))
}

/// Domain-loss weights the model assigns to the batch's target items.
pub fn target_weights(params: &ModelParams, batch: &Batch, invert_wt: bool) -> Result<Vec<f64>> {
    let x = stack_images(batch.target.iter().map(|x| &x.image), params.dims().input)?;
    let (features, _) = extractor_forward(params, x);
    let closed = closed_forward(params, &features.view());
    let open = open_forward(params, &features.view());
    Ok((0..batch.target.len())
        .map(|t| {
            let wt = unknown_weight(
                &scores_from_row(open.row(t)),
                closed.row(t).as_slice().expect("row-major"),
            );
            if invert_wt {
                1.0 - wt
            } else {
                wt
            }
        })
        .collect())
}

enum TargetWeights<'a> {
    Computed { invert: bool },
    Given(&'a [f64]),
}

fn objective_impl(
    params: &ModelParams,
    batch: &Batch,
    stage: &StageConfig,
    mode: GradMode,
    weights_from: TargetWeights,
) -> Result<(LossBreakdown, ModelParams)> {
    let ns = batch.source.len();
    let nt = batch.target.len();
    if ns == 0 {
        return Err(Error::InvalidArgument("batch has no source items".into()));
    }
    let w = stage.weights;
    let mut grads = params.zeros_like();

    let x = stack_images(
        batch.source.iter().chain(&batch.target).map(|x| &x.image),
        params.dims().input,
    )?;
    let (features, cache) = extractor_forward(params, x);
    let fv = features.view();
    let closed = closed_forward(params, &fv);
    let open = open_forward(params, &fv);
    let mut d_closed = Array2::<f64>::zeros(closed.raw_dim());
    let mut d_open = Array2::<f64>::zeros(open.raw_dim());

    let (mut ce, mut ova) = (0.0, 0.0);
    let inv_ns = 1.0 / ns as f64;
    for (i, item) in batch.source.iter().enumerate() {
        let label = item.label.class().ok_or_else(|| {
            Error::InvalidArgument(format!("source item {i} has no class label"))
        })?;
        let (l, g) = closed_set_ce_grad(closed.row(i).as_slice().expect("row-major"), label)?;
        ce += l * inv_ns;
        d_closed
            .row_mut(i)
            .iter_mut()
            .zip(g)
            .for_each(|(d, g)| *d += g * inv_ns);

        let scores = scores_from_row(open.row(i));
        let (l, g) = ova_loss_topk_grad(&scores, label, stage.top_k)?;
        ova += l * inv_ns;
        add_pair_grads(&mut d_open.row_mut(i), &g, w.ova * inv_ns);
    }

    let mut entropy = 0.0;
    let mut target_weights = Vec::with_capacity(nt);
    if nt > 0 {
        let inv_nt = 1.0 / nt as f64;
        for t in 0..nt {
            let r = ns + t;
            let scores = scores_from_row(open.row(r));
            let (h, g) = open_entropy_grad(&scores);
            entropy += h * inv_nt;
            add_pair_grads(&mut d_open.row_mut(r), &g, w.entropy * inv_nt);
            target_weights.push(match weights_from {
                TargetWeights::Given(w) => w[t],
                TargetWeights::Computed { invert } => {
                    let wt = unknown_weight(&scores, closed.row(r).as_slice().expect("row-major"));
                    if invert {
                        1.0 - wt
                    } else {
                        wt
                    }
                }
            });
        }
    }

    let mut d_features = closed_backward(params, &fv, &d_closed, &mut grads);
    d_features += &open_backward(params, &fv, &d_open, &mut grads);

    let mut domain_adv = 0.0;
    if stage.use_discriminator {
        let disc = disc_forward(params, &fv);
        let logits = disc.logits.as_slice().expect("contiguous");
        let (ld, gs, gt) = domain_adversarial_grad(&logits[..ns], &logits[ns..], &target_weights)?;
        domain_adv = ld;
        let d_logits: Array1<f64> = gs.into_iter().chain(gt).map(|g| g * w.domain).collect();
        let d_feat_disc = disc_backward(params, &fv, &disc, &d_logits, &mut grads);
        d_features += &match mode {
            GradMode::Reversed(grl) => grl.backward(d_feat_disc),
            GradMode::Plain => d_feat_disc,
        };
    }

    extractor_backward(params, &cache, &d_features, &mut grads);
    Ok((LossBreakdown::compose(ce, ova, entropy, domain_adv, w), grads))
}

/// `(range, lr)` pairs for the groups a stage optimizes.
pub fn optimized_groups(params: &ModelParams, stage: &StageConfig, lr_scale: f64) -> Vec<(Range<usize>, f64)> {
    ParamGroup::ALL
        .iter()
        .filter(|&&g| g != ParamGroup::Discriminator || stage.use_discriminator)
        .map(|&g| (params.layout().group(g), stage.group_lr(g) * lr_scale))
        .collect()
}

/// Everything a step needs besides the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub stage: &'a StageConfig,
    pub stage_index: usize,
    pub global_step: usize,
    /// Schedule multiplier applied to both group learning rates.
    pub lr_scale: f64,
    pub grl: GradReversal,
    pub invert_wt: bool,
    pub grad_clip_norm: Option<f64>,
}

fn non_finite(what: &str, ctx: &StepContext) -> Error {
    Error::NonFinite {
        what: what.to_string(),
        stage: ctx.stage_index,
        step: ctx.global_step,
    }
}

/// One optimizer update on `batch`. Returns the pre-update losses.
pub fn train_step(
    params: &mut ModelParams,
    batch: &Batch,
    ctx: &StepContext,
    optimizer: &mut Optimizer,
) -> Result<LossBreakdown> {
    let (losses, mut grads) = objective(
        params,
        batch,
        ctx.stage,
        GradMode::Reversed(ctx.grl),
        ctx.invert_wt,
    )?;
    if !losses.is_finite() {
        return Err(non_finite("loss", ctx));
    }
    if !grads.is_finite() {
        return Err(non_finite("gradient", ctx));
    }
    let groups = optimized_groups(params, ctx.stage, ctx.lr_scale);
    if let Some(max_norm) = ctx.grad_clip_norm {
        let norm = groups
            .iter()
            .flat_map(|(r, _)| grads.as_slice()[r.clone()].iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
    optimizer.step(params.as_mut_slice(), grads.as_slice(), &groups);
    if !params.is_finite() {
        return Err(non_finite("parameters", ctx));
    }
    Ok(losses)
}

/// Training images. Target reads are counted so a source-only run can prove
/// it never touched them.
pub struct TrainData<'a> {
    source: &'a [LabeledImage],
    target: Option<&'a [LabeledImage]>,
    target_reads: Cell<usize>,
}

impl<'a> TrainData<'a> {
    pub fn adapted(source: &'a [LabeledImage], target: &'a [LabeledImage]) -> Self {
        Self {
            source,
            target: Some(target),
            target_reads: Cell::new(0),
        }
    }

    pub fn source_only(source: &'a [LabeledImage]) -> Self {
        Self {
            source,
            target: None,
            target_reads: Cell::new(0),
        }
    }

    pub fn has_target(&self) -> bool {
        self.target.is_some()
    }

    pub fn target_reads(&self) -> usize {
        self.target_reads.get()
    }

    pub fn sample(&self, opts: &BatchOptions, rng: &mut ChaCha8Rng) -> Result<Batch> {
        match self.target {
            Some(target) => {
                self.target_reads.set(self.target_reads.get() + 1);
                make_batch(self.source, target, opts, rng)
            }
            None => make_source_batch(self.source, opts, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Global step index, starting at 0.
    pub step: usize,
    pub stage: usize,
    pub losses: LossBreakdown,
    pub lr_heads: f64,
    pub lr_backbone: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub stage: usize,
    /// Global steps completed.
    pub step: usize,
    pub stage_end: bool,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBoundary {
    pub stage: usize,
    pub first_step: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub snapshots: Vec<Snapshot>,
    pub stages: Vec<StageBoundary>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "step,stage,closed_ce,ova,entropy,domain_adv,total,lr_heads,lr_backbone";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step, r.stage, l.closed_ce, l.ova, l.entropy, l.domain_adv, l.total, r.lr_heads, r.lr_backbone
            );
        }
        out
    }

    /// Last stage-end snapshot for `stage`.
    pub fn stage_end_report(&self, stage: usize) -> Option<&MetricsReport> {
        self.snapshots
            .iter()
            .rev()
            .find(|s| s.stage == stage && s.stage_end)
            .map(|s| &s.report)
    }
}

/// Point in training handed to a [`TrainObserver`].
pub struct Checkpoint<'a> {
    pub stage: usize,
    pub step: usize,
    pub stage_end: bool,
    pub params: &'a ModelParams,
}

/// Called every `eval_every` global steps and at the end of each stage. A
/// returned report is stored as a snapshot in the log.
pub trait TrainObserver {
    fn observe(&mut self, at: &Checkpoint<'_>) -> Result<Option<MetricsReport>>;
}

pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn observe(&mut self, _: &Checkpoint<'_>) -> Result<Option<MetricsReport>> {
        Ok(None)
    }
}

impl<F> TrainObserver for F
where
    F: FnMut(&Checkpoint<'_>) -> Result<Option<MetricsReport>>,
{
    fn observe(&mut self, at: &Checkpoint<'_>) -> Result<Option<MetricsReport>> {
        self(at)
    }
}

/// Shared state of a multi-stage run.
pub struct RunState<'a> {
    pub cfg: &'a TrainConfig,
    pub crop_side: usize,
    pub rng: ChaCha8Rng,
    /// Global steps completed so far.
    pub step: usize,
}

impl<'a> RunState<'a> {
    pub fn new(cfg: &'a TrainConfig, crop_side: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            cfg,
            crop_side,
            rng,
            step: 0,
        }
    }
}

/// Runs exactly `stage.steps` updates with a fresh optimizer of the stage's
/// kind, appending one log row per step.
pub fn run_stage(
    params: &mut ModelParams,
    data: &TrainData,
    stage: &StageConfig,
    stage_index: usize,
    state: &mut RunState,
    observer: &mut dyn TrainObserver,
    log: &mut TrainLog,
) -> Result<()> {
    stage.validate(&format!("stage{stage_index}"))?;
    if stage.use_discriminator && !data.has_target() {
        return Err(Error::Config(format!(
            "stage{stage_index}: discriminator needs target data"
        )));
    }
    let cfg = state.cfg;
    let mut optimizer = Optimizer::new(stage.optimizer, cfg.adamw, cfg.momentum, params.len());
    let opts = BatchOptions {
        batch_size: cfg.batch_size,
        crop_side: state.crop_side,
        augment: cfg.augment_source,
    };
    log.stages.push(StageBoundary {
        stage: stage_index,
        first_step: state.step,
        steps: stage.steps,
    });

    for local in 0..stage.steps {
        let lr_scale = lr_schedule(local, stage.steps, 1.0, stage.warmup_fraction)?;
        let batch = data.sample(&opts, &mut state.rng)?;
        let ctx = StepContext {
            stage,
            stage_index,
            global_step: state.step,
            lr_scale,
            grl: cfg.grl,
            invert_wt: cfg.invert_wt,
            grad_clip_norm: cfg.grad_clip_norm,
        };
        let losses = train_step(params, &batch, &ctx, &mut optimizer)?;
        log.rows.push(LogRow {
            step: state.step,
            stage: stage_index,
            losses,
            lr_heads: stage.lr_heads * lr_scale,
            lr_backbone: stage.lr_backbone * lr_scale,
        });
        state.step += 1;

        let stage_end = local + 1 == stage.steps;
        let periodic = cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every);
        if stage_end || periodic {
            let at = Checkpoint {
                stage: stage_index,
                step: state.step,
                stage_end,
                params,
            };
            if let Some(report) = observer.observe(&at)? {
                log.snapshots.push(Snapshot {
                    stage: stage_index,
                    step: state.step,
                    stage_end,
                    report,
                });
            }
        }
    }
    Ok(())
}

/// Initializes from `cfg.seed`, runs stage 1 and (when enabled) stage 2, and
/// returns the final model. `log` keeps every completed row even on error.
pub fn train_full(
    cfg: &TrainConfig,
    dims: NetDims,
    crop_side: usize,
    data: &TrainData,
    observer: &mut dyn TrainObserver,
    log: &mut TrainLog,
) -> Result<ModelParams> {
    cfg.validate()?;
    if dims.input != crop_side * crop_side {
        return Err(Error::ShapeMismatch {
            expected: crop_side * crop_side,
            got: dims.input,
        });
    }
    let mut params = ModelParams::init(dims, cfg.seed)?;
    let mut state = RunState::new(cfg, crop_side);
    for (index, stage) in cfg.stages() {
        run_stage(&mut params, data, stage, index, &mut state, observer, log)?;
    }
    Ok(params)
}

/// Average of the stage's per-row totals; handy for progress reporting.
pub fn mean_total(rows: &[LogRow]) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().map(|r| r.losses.total).sum::<f64>() / rows.len() as f64
}

/// Feature-gradient helper for tests and diagnostics: the gradient of the
/// domain loss with respect to the features, under `mode`.
pub fn domain_feature_grad(
    params: &ModelParams,
    features: &Array2<f64>,
    n_source: usize,
    target_weights: &[f64],
    mode: GradMode,
) -> Result<(f64, Array2<f64>)> {
    let fv = features.view();
    let disc = disc_forward(params, &fv);
    let logits = disc.logits.as_slice().expect("contiguous");
    let (loss, gs, gt) = domain_adversarial_grad(&logits[..n_source], &logits[n_source..], target_weights)?;
    let d_logits: Array1<f64> = gs.into_iter().chain(gt).collect();
    let mut scratch = params.zeros_like();
    let d = disc_backward(params, &fv, &disc, &d_logits, &mut scratch);
    let d = match mode {
        GradMode::Reversed(grl) => grl.backward(d),
        GradMode::Plain => d,
    };
    debug_assert_eq!(d.len_of(Axis(0)), features.nrows());
    Ok((loss, d))
}
