use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unida::data::{generate_dataset, make_batch, Batch, BatchOptions, DatasetSpec};
use unida::losses::LossWeights;
use unida::net::{GradReversal, ModelParams, NetDims, ParamGroup};
use unida::optim::{AdamWConfig, MomentumConfig, Optimizer, OptimizerKind};
use unida::trainer::{
    objective, run_stage, train_step, GradMode, NoObserver, RunState, StageConfig, StepContext,
    TrainConfig, TrainData, TrainLog,
};

fn spec() -> DatasetSpec {
    DatasetSpec {
        samples_per_class_source: 6,
        samples_per_class_target: 6,
        image_side: 12,
        crop_side: 10,
        ..DatasetSpec::default()
    }
}

fn dims(classes: usize) -> NetDims {
    NetDims {
        input: 100,
        hidden1: 16,
        hidden2: 12,
        feature: 8,
        classes,
        disc_hidden: 6,
    }
}

fn setup(seed: u64) -> (ModelParams, Batch) {
    let spec = spec();
    let ds = generate_dataset(&spec).unwrap();
    let opts = BatchOptions {
        batch_size: 8,
        crop_side: 10,
        augment: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = make_batch(&ds.source, &ds.target_train, &opts, &mut rng).unwrap();
    let params = ModelParams::init(dims(spec.num_source_classes()), seed).unwrap();
    (params, batch)
}

fn stage(kind: OptimizerKind, lr: f64, disc: bool) -> StageConfig {
    StageConfig {
        steps: 1,
        lr_heads: lr,
        lr_backbone: lr,
        warmup_fraction: 0.0,
        optimizer: kind,
        use_discriminator: disc,
        weights: LossWeights::default(),
        top_k: 3,
    }
}

fn ctx(stage: &StageConfig, lr_scale: f64) -> StepContext<'_> {
    StepContext {
        stage,
        stage_index: 1,
        global_step: 0,
        lr_scale,
        grl: GradReversal::default(),
        invert_wt: false,
        grad_clip_norm: None,
    }
}

fn optimizer(kind: OptimizerKind, len: usize) -> Optimizer {
    Optimizer::new(kind, AdamWConfig::default(), MomentumConfig::default(), len)
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let (mut params, batch) = setup(1);
    let before = params.clone();
    let mut st = stage(OptimizerKind::Adaptive, 1e-3, true);
    st.weights = LossWeights {
        ova: 0.0,
        entropy: 0.0,
        domain: 0.0,
    };
    let mut opt = optimizer(st.optimizer, params.len());
    let losses = train_step(&mut params, &batch, &ctx(&st, 0.0), &mut opt).unwrap();
    assert_eq!(params, before);
    assert!(losses.closed_ce > 0.0);
}

#[test]
fn small_step_decreases_the_batch_loss() {
    for kind in [OptimizerKind::Adaptive, OptimizerKind::Momentum] {
        let (mut params, batch) = setup(2);
        let lr = match kind {
            OptimizerKind::Adaptive => 1e-4,
            OptimizerKind::Momentum => 1e-3,
        };
        let st = stage(kind, lr, false);
        let mut opt = optimizer(kind, params.len());
        let before = train_step(&mut params, &batch, &ctx(&st, 1.0), &mut opt).unwrap();
        let (after, _) = objective(&params, &batch, &st, GradMode::Plain, false).unwrap();
        assert!(after.total < before.total, "{kind:?}: {} -> {}", before.total, after.total);
    }
}

#[test]
fn without_discriminator_its_weights_stay_put() {
    let (mut params, batch) = setup(3);
    let before = params.group(ParamGroup::Discriminator).to_vec();
    let st = stage(OptimizerKind::Momentum, 1e-2, false);
    let mut opt = optimizer(st.optimizer, params.len());
    for _ in 0..3 {
        let losses = train_step(&mut params, &batch, &ctx(&st, 1.0), &mut opt).unwrap();
        assert_eq!(losses.domain_adv, 0.0);
    }
    assert_eq!(params.group(ParamGroup::Discriminator), &before[..]);
}

#[test]
fn zero_group_rate_leaves_group_bit_identical() {
    let (mut params, batch) = setup(4);
    let extractor = params.group(ParamGroup::Extractor).to_vec();
    let closed = params.group(ParamGroup::ClosedHead).to_vec();
    let open = params.group(ParamGroup::OpenHead).to_vec();
    let mut st = stage(OptimizerKind::Adaptive, 1e-3, true);
    st.lr_backbone = 0.0;
    let mut opt = optimizer(st.optimizer, params.len());
    train_step(&mut params, &batch, &ctx(&st, 1.0), &mut opt).unwrap();
    assert_eq!(params.group(ParamGroup::Extractor), &extractor[..]);
    assert_eq!(params.group(ParamGroup::ClosedHead), &closed[..]);
    assert_ne!(params.group(ParamGroup::OpenHead), &open[..]);
}

#[test]
fn breakdown_total_recomposes_during_training() {
    let (mut params, batch) = setup(5);
    let mut st = stage(OptimizerKind::Adaptive, 1e-3, true);
    st.weights = LossWeights {
        ova: 0.7,
        entropy: 0.3,
        domain: 1.5,
    };
    let mut opt = optimizer(st.optimizer, params.len());
    for _ in 0..3 {
        let l = train_step(&mut params, &batch, &ctx(&st, 1.0), &mut opt).unwrap();
        let want = l.closed_ce + 0.7 * l.ova + 0.3 * l.entropy + 1.5 * l.domain_adv;
        assert_eq!(l.total, want);
    }
}

#[test]
fn single_step_stage_logs_one_row() {
    let spec = spec();
    let ds = generate_dataset(&spec).unwrap();
    let data = TrainData::adapted(&ds.source, &ds.target_train);
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 4;
    let st = StageConfig {
        steps: 1,
        ..cfg.stage1
    };
    let mut params = ModelParams::init(dims(spec.num_source_classes()), 0).unwrap();
    let mut state = RunState::new(&cfg, 10);
    let mut log = TrainLog::default();
    run_stage(&mut params, &data, &st, 1, &mut state, &mut NoObserver, &mut log).unwrap();
    assert_eq!(log.rows.len(), 1);
    assert_eq!(state.step, 1);

    let zero = StageConfig { steps: 0, ..st };
    assert!(run_stage(&mut params, &data, &zero, 1, &mut state, &mut NoObserver, &mut log).is_err());
}

#[test]
fn gradient_clipping_bounds_the_update() {
    let (params, batch) = setup(6);
    let st = stage(OptimizerKind::Momentum, 1.0, true);
    let (_, grads) = objective(&params, &batch, &st, GradMode::Reversed(GradReversal::default()), false).unwrap();
    let norm = grads.norm();
    assert!(norm > 1e-3);

    let max = norm / 10.0;
    let mut clipped = params.clone();
    let mut c = ctx(&st, 1.0);
    c.grad_clip_norm = Some(max);
    let mut opt = optimizer(st.optimizer, params.len());
    train_step(&mut clipped, &batch, &c, &mut opt).unwrap();
    let moved: f64 = clipped
        .as_slice()
        .iter()
        .zip(params.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    // first momentum step moves by lr * g exactly
    assert!((moved - max).abs() < 1e-9 * max.max(1.0), "{moved} vs {max}");
}
