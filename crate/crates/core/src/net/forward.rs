use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{ModelParams, Slot};
use crate::data::Image;
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    fn as_row(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((1, self.0.len()), &self.0).expect("row shape")
    }
}

/// One-vs-all outputs: a (positive, negative) logit pair per class.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetScores {
    logit_pairs: Vec<[f64; 2]>,
    known_prob: Vec<f64>,
}

impl OpenSetScores {
    pub fn from_logit_pairs(logit_pairs: Vec<[f64; 2]>) -> Self {
        let known_prob = logit_pairs.iter().map(|[p, n]| sigmoid(p - n)).collect();
        Self {
            logit_pairs,
            known_prob,
        }
    }

    /// Builds scores whose known probabilities are exactly `probs`, using
    /// the pair `(logit(p), 0)`. `p` may be 0 or 1.
    pub fn from_known_probs(probs: &[f64]) -> Self {
        let logit_pairs = probs.iter().map(|&p| [p.ln() - (-p).ln_1p(), 0.0]).collect();
        Self {
            logit_pairs,
            known_prob: probs.to_vec(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.logit_pairs.len()
    }

    pub fn logit_pairs(&self) -> &[[f64; 2]] {
        &self.logit_pairs
    }

    /// `z_pos - z_neg` for class `k`.
    pub fn margin(&self, k: usize) -> f64 {
        let [p, n] = self.logit_pairs[k];
        p - n
    }

    /// `exp(z_pos) / (exp(z_pos) + exp(z_neg))`.
    pub fn known_prob(&self) -> &[f64] {
        &self.known_prob
    }

    pub fn unknown_prob(&self, k: usize) -> f64 {
        1.0 - self.known_prob[k]
    }
}

/// Identity on the forward pass; scales gradients by `-lambda` on the way
/// back from the discriminator into the extractor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradReversal {
    pub lambda: f64,
}

impl Default for GradReversal {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

impl GradReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reversal lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn forward<T>(&self, x: T) -> T {
        x
    }

    pub fn backward(&self, mut grad: Array2<f64>) -> Array2<f64> {
        grad *= -self.lambda;
        grad
    }
}

fn affine(p: &ModelParams, x: &ArrayView2<f64>, w: Slot, b: Slot) -> Array2<f64> {
    let mut z = x.dot(&p.matrix(w).t());
    z += &p.vector(b);
    z
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn affine_backward(
    p: &ModelParams,
    x: &ArrayView2<f64>,
    dz: &Array2<f64>,
    w: Slot,
    b: Slot,
    grads: &mut ModelParams,
) -> Array2<f64> {
    grads.matrix_mut(w).scaled_add(1.0, &dz.t().dot(x));
    grads.vector_mut(b).scaled_add(1.0, &dz.sum_axis(Axis(0)));
    dz.dot(&p.matrix(w))
}

fn tanh_backward(d_out: Array2<f64>, out: &Array2<f64>) -> Array2<f64> {
    let mut d = d_out;
    d.zip_mut_with(out, |g, &y| *g *= 1.0 - y * y);
    d
}

/// Activations kept for the extractor backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

/// Stacks images (already cropped) into an `n × pixels` matrix.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>, pixels: usize) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut rows = 0;
    for img in images {
        if img.pixels().len() != pixels {
            return Err(Error::ShapeMismatch {
                expected: pixels,
                got: img.pixels().len(),
            });
        }
        data.extend_from_slice(img.pixels());
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, pixels), data).expect("stacked shape"))
}

/// `input → tanh(256) → tanh(128) → 64`, one row per sample.
pub fn extractor_forward(p: &ModelParams, input: Array2<f64>) -> (Array2<f64>, ExtractorCache) {
    let l = *p.layout();
    let h1 = affine(p, &input.view(), l.w1, l.b1).mapv_into(f64::tanh);
    let h2 = affine(p, &h1.view(), l.w2, l.b2).mapv_into(f64::tanh);
    let features = affine(p, &h2.view(), l.w3, l.b3);
    (features, ExtractorCache { input, h1, h2 })
}

pub fn extractor_backward(
    p: &ModelParams,
    cache: &ExtractorCache,
    d_features: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let l = *p.layout();
    let d_h2 = affine_backward(p, &cache.h2.view(), d_features, l.w3, l.b3, grads);
    let d_a2 = tanh_backward(d_h2, &cache.h2);
    let d_h1 = affine_backward(p, &cache.h1.view(), &d_a2, l.w2, l.b2, grads);
    let d_a1 = tanh_backward(d_h1, &cache.h1);
    // input gradient is not needed
    grads.matrix_mut(l.w1).scaled_add(1.0, &d_a1.t().dot(&cache.input));
    grads.vector_mut(l.b1).scaled_add(1.0, &d_a1.sum_axis(Axis(0)));
}

pub fn closed_forward(p: &ModelParams, features: &ArrayView2<f64>) -> Array2<f64> {
    let l = p.layout();
    affine(p, features, l.wc, l.bc)
}

pub fn closed_backward(
    p: &ModelParams,
    features: &ArrayView2<f64>,
    d_logits: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let l = *p.layout();
    affine_backward(p, features, d_logits, l.wc, l.bc, grads)
}

/// `n × 2K` logits; columns `2k, 2k+1` are class `k`'s (positive, negative).
pub fn open_forward(p: &ModelParams, features: &ArrayView2<f64>) -> Array2<f64> {
    let l = p.layout();
    affine(p, features, l.wo, l.bo)
}

pub fn open_backward(
    p: &ModelParams,
    features: &ArrayView2<f64>,
    d_logits: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let l = *p.layout();
    affine_backward(p, features, d_logits, l.wo, l.bo, grads)
}

pub fn scores_from_row(row: ndarray::ArrayView1<f64>) -> OpenSetScores {
    let pairs = row
        .as_slice()
        .map(|s| s.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        .unwrap_or_else(|| {
            let v: Vec<f64> = row.to_vec();
            v.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
        });
    OpenSetScores::from_logit_pairs(pairs)
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    hidden: Array2<f64>,
    /// Pre-sigmoid outputs, one per sample.
    pub logits: Array1<f64>,
}

impl DiscriminatorCache {
    pub fn probs(&self) -> Array1<f64> {
        self.logits.mapv(sigmoid)
    }
}

pub fn disc_forward(p: &ModelParams, features: &ArrayView2<f64>) -> DiscriminatorCache {
    let l = *p.layout();
    let hidden = affine(p, features, l.wd1, l.bd1).mapv_into(f64::tanh);
    let logits = affine(p, &hidden.view(), l.wd2, l.bd2).column(0).to_owned();
    DiscriminatorCache { hidden, logits }
}

/// Backward through D given `dL/dlogit` per sample. Discriminator gradients
/// are accumulated unscaled; the returned feature gradient is *not* reversed
/// (pass it through [`GradReversal::backward`]).
pub fn disc_backward(
    p: &ModelParams,
    features: &ArrayView2<f64>,
    cache: &DiscriminatorCache,
    d_logits: &Array1<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let l = *p.layout();
    let dz = d_logits.view().insert_axis(Axis(1)).to_owned();
    let d_hidden = affine_backward(p, &cache.hidden.view(), &dz, l.wd2, l.bd2, grads);
    let d_a = tanh_backward(d_hidden, &cache.hidden);
    affine_backward(p, features, &d_a, l.wd1, l.bd1, grads)
}

pub fn extract_features(p: &ModelParams, crop: &Image) -> Result<FeatureVector> {
    let x = stack_images([crop], p.dims().input)?;
    let (f, _) = extractor_forward(p, x);
    Ok(FeatureVector(f.row(0).to_vec()))
}

fn check_feature(p: &ModelParams, f: &FeatureVector) -> Result<()> {
    if f.0.len() != p.dims().feature {
        return Err(Error::ShapeMismatch {
            expected: p.dims().feature,
            got: f.0.len(),
        });
    }
    Ok(())
}

pub fn closed_logits(p: &ModelParams, f: &FeatureVector) -> Result<Vec<f64>> {
    check_feature(p, f)?;
    Ok(closed_forward(p, &f.as_row()).row(0).to_vec())
}

pub fn open_scores(p: &ModelParams, f: &FeatureVector) -> Result<OpenSetScores> {
    check_feature(p, f)?;
    Ok(scores_from_row(open_forward(p, &f.as_row()).row(0)))
}

/// `D(F(x))`: probability that the feature came from the source domain.
/// The reversal only matters on the backward pass.
pub fn discriminate(p: &ModelParams, f: &FeatureVector, grl: &GradReversal) -> Result<f64> {
    check_feature(p, f)?;
    let cache = disc_forward(p, &grl.forward(f.as_row()));
    Ok(sigmoid(cache.logits[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> NetDims {
        NetDims {
            input: 9,
            hidden1: 6,
            hidden2: 5,
            feature: 4,
            classes: 3,
            disc_hidden: 4,
        }
    }

    fn random_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(side, (0..side * side).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn zero_model_maps_zero_image_to_zero_features() {
        let p = ModelParams::zeros(NetDims::standard(28 * 28, 8));
        let f = extract_features(&p, &Image::filled(28, 0.0)).unwrap();
        assert_eq!(f.0.len(), 64);
        assert!(f.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let p = ModelParams::init(small_dims(), 3).unwrap();
        let before = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(3, &mut rng);
        let a = extract_features(&p, &img).unwrap();
        let b = extract_features(&p, &img).unwrap();
        assert_eq!(a, b);
        let _ = open_scores(&p, &a).unwrap();
        let _ = discriminate(&p, &a, &GradReversal::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn wrong_crop_size_is_a_shape_error() {
        let p = ModelParams::init(small_dims(), 3).unwrap();
        assert!(matches!(
            extract_features(&p, &Image::filled(4, 0.0)),
            Err(Error::ShapeMismatch { expected: 9, got: 16 })
        ));
    }

    #[test]
    fn zero_closed_head_gives_zero_logits_and_class_zero() {
        let p = ModelParams::zeros(small_dims());
        let logits = closed_logits(&p, &FeatureVector(vec![0.3, -1.0, 2.0, 0.5])).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        assert_eq!(argmax(&logits), 0);
    }

    #[test]
    fn identity_rows_pick_features() {
        let mut p = ModelParams::zeros(small_dims());
        let wc = p.layout().wc;
        for k in 0..3 {
            p.matrix_mut(wc)[[k, k]] = 1.0;
        }
        let f = FeatureVector(vec![0.3, -1.0, 2.0, 0.5]);
        assert_eq!(closed_logits(&p, &f).unwrap(), vec![0.3, -1.0, 2.0]);
    }

    #[test]
    fn closed_logits_match_naive_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for seed in 0..20 {
            let mut p = ModelParams::init(small_dims(), seed).unwrap();
            let bc = p.layout().bc;
            for b in p.as_mut_slice()[bc.range()].iter_mut() {
                *b = rng.random_range(-1.0..1.0);
            }
            let f = FeatureVector((0..4).map(|_| rng.random_range(-2.0..2.0)).collect());
            let got = closed_logits(&p, &f).unwrap();
            let w = p.matrix(p.layout().wc);
            let b = p.vector(bc);
            for k in 0..3 {
                let mut acc = b[k];
                for j in 0..4 {
                    acc += w[[k, j]] * f.0[j];
                }
                assert!((got[k] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn known_prob_examples() {
        let s = OpenSetScores::from_logit_pairs(vec![[0.0, 0.0], [3f64.ln(), 0.0], [40.0, 0.0]]);
        assert_eq!(s.known_prob()[0], 0.5);
        assert!((s.known_prob()[1] - 0.75).abs() < 1e-15);
        let p = s.known_prob()[2];
        // 1 - sigmoid(40) = 4.248354255291589e-18, far below f64 spacing at 1
        assert!(p > 1.0 - 1e-12 && p <= 1.0);
        assert!(p.is_finite());
        let big = OpenSetScores::from_logit_pairs(vec![[800.0, -800.0], [-800.0, 800.0]]);
        assert_eq!(big.known_prob(), &[1.0, 0.0]);
    }

    #[test]
    fn known_prob_is_monotone_in_margin() {
        let margins: Vec<f64> = (-30..=30).map(|i| i as f64 * 0.5).collect();
        let s = OpenSetScores::from_logit_pairs(margins.iter().map(|&m| [m, 0.0]).collect());
        for w in s.known_prob().windows(2) {
            assert!(w[0] <= w[1]);
        }
        for &p in &s.known_prob()[1..s.num_classes() - 1] {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zero_discriminator_outputs_half() {
        let p = ModelParams::zeros(small_dims());
        let f = FeatureVector(vec![1.0, 2.0, -3.0, 0.1]);
        assert_eq!(discriminate(&p, &f, &GradReversal::default()).unwrap(), 0.5);
    }

    #[test]
    fn reversal_scales_by_negative_lambda() {
        let g = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let out = GradReversal::new(0.5).unwrap().backward(g);
        assert_eq!(out.as_slice().unwrap(), &[-0.5, 1.0, -0.25]);
        assert!(GradReversal::new(-1.0).is_err());
        assert!(GradReversal::new(f64::NAN).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(f64::INFINITY), f64::INFINITY);
    }
}
