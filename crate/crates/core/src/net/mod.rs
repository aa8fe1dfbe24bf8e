//! The differentiable model: extractor F, closed-set head, one-vs-all
//! open-set head and domain discriminator D.
//!
//! All parameters live in one flat `f64` buffer with a fixed tensor order
//! (see [`Layout`]). Gradients use the same type and layout, which keeps the
//! optimizer, clipping, per-group learning rates and checkpoints trivial.

mod checkpoint;
mod forward;

use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, TensorEntry};
pub use forward::{
    argmax, closed_backward, closed_forward, closed_logits, disc_backward, disc_forward,
    discriminate, extract_features, extractor_backward, extractor_forward, open_backward,
    open_forward, open_scores, scores_from_row, sigmoid, softplus, stack_images,
    DiscriminatorCache, ExtractorCache, FeatureVector, GradReversal, OpenSetScores,
};

/// Layer widths. `input` is the flattened crop size, `classes` is K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub feature: usize,
    pub classes: usize,
    pub disc_hidden: usize,
}

impl NetDims {
    pub fn standard(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden1: 256,
            hidden2: 128,
            feature: 64,
            classes,
            disc_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.input,
            self.hidden1,
            self.hidden2,
            self.feature,
            self.classes,
            self.disc_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-width layer in {self:?}")));
        }
        Ok(())
    }
}

/// Position of one tensor inside the flat buffer. Matrices are row-major
/// `rows × cols` (output × input); biases have `cols == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor order in the flat buffer and in checkpoints:
/// `w1 b1 w2 b2 w3 b3 | wc bc | wo bo | wd1 bd1 wd2 bd2`.
///
/// Open-head rows come in pairs: row `2k` is the positive logit of class `k`,
/// row `2k + 1` the negative one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
    pub w3: Slot,
    pub b3: Slot,
    pub wc: Slot,
    pub bc: Slot,
    pub wo: Slot,
    pub bo: Slot,
    pub wd1: Slot,
    pub bd1: Slot,
    pub wd2: Slot,
    pub bd2: Slot,
    pub total: usize,
}

impl Layout {
    pub fn new(d: &NetDims) -> Self {
        let mut offset = 0;
        let mut next = |rows: usize, cols: usize| {
            let slot = Slot { offset, rows, cols };
            offset += rows * cols;
            slot
        };
        let w1 = next(d.hidden1, d.input);
        let b1 = next(d.hidden1, 1);
        let w2 = next(d.hidden2, d.hidden1);
        let b2 = next(d.hidden2, 1);
        let w3 = next(d.feature, d.hidden2);
        let b3 = next(d.feature, 1);
        let wc = next(d.classes, d.feature);
        let bc = next(d.classes, 1);
        let wo = next(2 * d.classes, d.feature);
        let bo = next(2 * d.classes, 1);
        let wd1 = next(d.disc_hidden, d.feature);
        let bd1 = next(d.disc_hidden, 1);
        let wd2 = next(1, d.disc_hidden);
        let bd2 = next(1, 1);
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            wc,
            bc,
            wo,
            bo,
            wd1,
            bd1,
            wd2,
            bd2,
            total: offset,
        }
    }

    pub fn named(&self) -> [(&'static str, Slot); 14] {
        [
            ("extractor.w1", self.w1),
            ("extractor.b1", self.b1),
            ("extractor.w2", self.w2),
            ("extractor.b2", self.b2),
            ("extractor.w3", self.w3),
            ("extractor.b3", self.b3),
            ("closed_head.w", self.wc),
            ("closed_head.b", self.bc),
            ("open_head.w", self.wo),
            ("open_head.b", self.bo),
            ("discriminator.w1", self.wd1),
            ("discriminator.b1", self.bd1),
            ("discriminator.w2", self.wd2),
            ("discriminator.b2", self.bd2),
        ]
    }

    pub fn group(&self, group: ParamGroup) -> Range<usize> {
        match group {
            ParamGroup::Extractor => self.w1.offset..self.b3.range().end,
            ParamGroup::ClosedHead => self.wc.offset..self.bc.range().end,
            ParamGroup::OpenHead => self.wo.offset..self.bo.range().end,
            ParamGroup::Discriminator => self.wd1.offset..self.bd2.range().end,
        }
    }

    fn weight_slots(&self) -> [Slot; 7] {
        [self.w1, self.w2, self.w3, self.wc, self.wo, self.wd1, self.wd2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    ClosedHead,
    OpenHead,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Extractor,
        ParamGroup::ClosedHead,
        ParamGroup::OpenHead,
        ParamGroup::Discriminator,
    ];
}

/// All trainable parameters (or a gradient with the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: NetDims,
    layout: Layout,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: NetDims) -> Self {
        let layout = Layout::new(&dims);
        Self {
            dims,
            layout,
            data: vec![0.0; layout.total],
        }
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: NetDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut params = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in params.layout.weight_slots() {
            let bound = 1.0 / (slot.cols as f64).sqrt();
            for w in &mut params.data[slot.range()] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn from_vec(dims: NetDims, data: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&dims);
        if data.len() != layout.total {
            return Err(Error::ShapeMismatch {
                expected: layout.total,
                got: data.len(),
            });
        }
        Ok(Self { dims, layout, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn group(&self, group: ParamGroup) -> &[f64] {
        &self.data[self.layout.group(group)]
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        let range = self.layout.group(group);
        &mut self.data[range]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matrix(&self, slot: Slot) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((slot.rows, slot.cols), &self.data[slot.range()])
            .expect("slot shape matches layout")
    }

    pub fn matrix_mut(&mut self, slot: Slot) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((slot.rows, slot.cols), &mut self.data[slot.range()])
            .expect("slot shape matches layout")
    }

    pub fn vector(&self, slot: Slot) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[slot.range()])
    }

    pub fn vector_mut(&mut self, slot: Slot) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[slot.range()])
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &ModelParams) {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}
