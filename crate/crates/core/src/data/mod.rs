//! Synthetic universal-domain-adaptation benchmark.
//!
//! Every class is a Gaussian blob whose position on a circle around the image
//! center encodes the class. Classes are split into three roles: shared by
//! both domains, private to the source (missing in the target), and private to
//! the target (novel, to be rejected as unknown). Target images are rendered
//! from the same per-draw geometry as source images and then pushed through a
//! [`DomainShift`].

mod render;
mod store;
mod transform;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use render::render;
pub use store::{load_dataset, save_dataset, DatasetManifest};
pub use transform::{
    augment_source, center_crop, crop, Batch, erase_square, five_crop_anchors, five_crops,
    jitter_intensity, make_batch, make_source_batch, random_crop, BatchOptions,
};

/// Square single-channel image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: side * side,
                got: pixels.len(),
            });
        }
        Ok(Self { side, pixels })
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self {
            side,
            pixels: vec![value; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.side + col] = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Ground truth attached to an image.
///
/// Source images always carry `Class`. Target test images carry `Class` for
/// shared classes and `Unknown` for novel ones. Target training images carry
/// `Hidden`: the trainer never sees their labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Class(usize),
    Unknown,
    Hidden,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }

    /// Integer form used by the labels file: the class index, or -1.
    pub fn to_code(self) -> i64 {
        match self {
            Label::Class(c) => c as i64,
            Label::Unknown | Label::Hidden => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
    pub domain: Domain,
    /// Set by [`augment_source`]; never set on target images.
    pub augmented: bool,
}

impl LabeledImage {
    pub fn new(image: Image, label: Label, domain: Domain) -> Self {
        Self {
            image,
            label,
            domain,
            augmented: false,
        }
    }

    pub fn is_unknown(&self) -> bool {
        self.label == Label::Unknown
    }
}

/// Appearance change applied to every target image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub intensity_scale: f64,
    pub intensity_offset: f64,
    pub noise_sigma_source: f64,
    pub noise_sigma_target: f64,
    /// Horizontal blob displacement in pixels.
    pub blob_translation: i32,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            intensity_scale: 0.7,
            intensity_offset: 0.1,
            noise_sigma_source: 0.05,
            noise_sigma_target: 0.15,
            blob_translation: 3,
        }
    }
}

impl DomainShift {
    /// No shift and no noise in either domain.
    pub fn identity() -> Self {
        Self {
            intensity_scale: 1.0,
            intensity_offset: 0.0,
            noise_sigma_source: 0.0,
            noise_sigma_target: 0.0,
            blob_translation: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub total_classes: usize,
    pub shared_classes: usize,
    pub source_private: usize,
    pub target_private: usize,
    pub image_side: usize,
    pub crop_side: usize,
    /// Nominal blob standard deviation in pixels.
    pub blob_sigma: f64,
    pub samples_per_class_source: usize,
    pub samples_per_class_target: usize,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            total_classes: 10,
            shared_classes: 5,
            source_private: 3,
            target_private: 2,
            image_side: 32,
            crop_side: 28,
            blob_sigma: 2.0,
            samples_per_class_source: 100,
            samples_per_class_target: 100,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Shared,
    SourcePrivate,
    TargetPrivate,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.shared_classes + self.source_private + self.target_private != self.total_classes {
            return fail(format!(
                "shared ({}) + source_private ({}) + target_private ({}) != total_classes ({})",
                self.shared_classes, self.source_private, self.target_private, self.total_classes
            ));
        }
        if self.num_source_classes() == 0 {
            return fail("source domain has no classes".into());
        }
        if self.num_target_classes() == 0 {
            return fail("target domain has no classes".into());
        }
        if self.crop_side == 0 || self.crop_side > self.image_side {
            return fail(format!(
                "crop_side {} must be in 1..={}",
                self.crop_side, self.image_side
            ));
        }
        if self.samples_per_class_source == 0 || self.samples_per_class_target == 0 {
            return fail("samples per class must be positive".into());
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return fail(format!("blob_sigma must be positive, got {}", self.blob_sigma));
        }
        let s = &self.shift;
        if !(s.intensity_scale.is_finite() && s.intensity_scale > 0.0) {
            return fail(format!("intensity_scale must be positive, got {}", s.intensity_scale));
        }
        if !s.intensity_offset.is_finite() {
            return fail("intensity_offset must be finite".into());
        }
        for (name, sigma) in [
            ("noise_sigma_source", s.noise_sigma_source),
            ("noise_sigma_target", s.noise_sigma_target),
        ] {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return fail(format!("{name} must be >= 0, got {sigma}"));
            }
        }
        Ok(())
    }

    /// Classes `0..shared` are shared, the next `source_private` are missing
    /// from the target, and the last `target_private` are novel.
    pub fn role(&self, class: usize) -> ClassRole {
        if class < self.shared_classes {
            ClassRole::Shared
        } else if class < self.shared_classes + self.source_private {
            ClassRole::SourcePrivate
        } else {
            ClassRole::TargetPrivate
        }
    }

    /// K: the closed-set size. Source labels are `0..K`.
    pub fn num_source_classes(&self) -> usize {
        self.shared_classes + self.source_private
    }

    pub fn num_target_classes(&self) -> usize {
        self.shared_classes + self.target_private
    }

    pub fn source_classes(&self) -> Vec<usize> {
        (0..self.total_classes)
            .filter(|&c| self.role(c) != ClassRole::TargetPrivate)
            .collect()
    }

    pub fn target_classes(&self) -> Vec<usize> {
        (0..self.total_classes)
            .filter(|&c| self.role(c) != ClassRole::SourcePrivate)
            .collect()
    }

    pub fn crop_pixels(&self) -> usize {
        self.crop_side * self.crop_side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub source: Vec<LabeledImage>,
    pub target_train: Vec<LabeledImage>,
    pub target_test: Vec<LabeledImage>,
}

/// Renders the full benchmark. Deterministic in `spec.seed`.
///
/// Draw indices are disjoint across splits: the source set uses draws
/// `0..n_s`, target-train `n_s..n_s+n_t`, target-test the next `n_t`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_s = spec.samples_per_class_source;
    let n_t = spec.samples_per_class_target;

    let mut source = Vec::with_capacity(spec.num_source_classes() * n_s);
    for class in spec.source_classes() {
        for draw in 0..n_s {
            let img = render(spec, class, draw as u64, Domain::Source);
            source.push(LabeledImage::new(img, Label::Class(class), Domain::Source));
        }
    }

    let mut target_train = Vec::with_capacity(spec.num_target_classes() * n_t);
    let mut target_test = Vec::with_capacity(spec.num_target_classes() * n_t);
    for class in spec.target_classes() {
        let truth = match spec.role(class) {
            ClassRole::TargetPrivate => Label::Unknown,
            _ => Label::Class(class),
        };
        for i in 0..n_t {
            let draw = (n_s + i) as u64;
            let img = render(spec, class, draw, Domain::Target);
            target_train.push(LabeledImage::new(img, Label::Hidden, Domain::Target));

            let draw = (n_s + n_t + i) as u64;
            let img = render(spec, class, draw, Domain::Target);
            target_test.push(LabeledImage::new(img, truth, Domain::Target));
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        source,
        target_train,
        target_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            samples_per_class_source: 4,
            samples_per_class_target: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn label_sets_overlap_in_shared_classes() {
        let spec = small_spec();
        let src: BTreeSet<_> = spec.source_classes().into_iter().collect();
        let tgt: BTreeSet<_> = spec.target_classes().into_iter().collect();
        assert_eq!(src.len(), 8);
        assert_eq!(tgt.len(), 7);
        assert_eq!(src.intersection(&tgt).count(), 5);
    }

    #[test]
    fn partition_is_exhaustive_for_all_small_specs() {
        for total in 2..=9usize {
            for shared in 0..=total {
                for sp in 0..=(total - shared) {
                    let tp = total - shared - sp;
                    let spec = DatasetSpec {
                        total_classes: total,
                        shared_classes: shared,
                        source_private: sp,
                        target_private: tp,
                        ..small_spec()
                    };
                    if spec.validate().is_err() {
                        assert!(shared + sp == 0 || shared + tp == 0);
                        continue;
                    }
                    let counts = (0..total).fold([0usize; 3], |mut acc, c| {
                        acc[spec.role(c) as usize] += 1;
                        acc
                    });
                    assert_eq!(counts, [shared, sp, tp]);
                }
            }
        }
    }

    #[test]
    fn rejects_inconsistent_counts() {
        let spec = DatasetSpec {
            total_classes: 11,
            ..small_spec()
        };
        assert!(matches!(generate_dataset(&spec), Err(Error::InvalidSpec(_))));
        let spec = DatasetSpec {
            crop_side: 33,
            ..small_spec()
        };
        assert!(generate_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.shift.noise_sigma_target = -0.1;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = small_spec();
        spec.shift.intensity_scale = 0.0;
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn split_sizes_and_labels() {
        let spec = small_spec();
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.source.len(), 8 * 4);
        assert_eq!(ds.target_train.len(), 7 * 3);
        assert_eq!(ds.target_test.len(), 7 * 3);
        assert!(ds.source.iter().all(|x| x.domain == Domain::Source));
        assert!(ds
            .source
            .iter()
            .all(|x| matches!(x.label, Label::Class(c) if c < 8)));
        assert!(ds.target_train.iter().all(|x| x.label == Label::Hidden));
        let unknown = ds.target_test.iter().filter(|x| x.is_unknown()).count();
        assert_eq!(unknown, 2 * 3);
        for x in &ds.target_test {
            if let Label::Class(c) = x.label {
                assert_eq!(spec.role(c), ClassRole::Shared);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        let bits = |d: &Dataset| -> Vec<u64> {
            d.source
                .iter()
                .chain(&d.target_train)
                .chain(&d.target_test)
                .flat_map(|x| x.image.pixels().iter().map(|p| p.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        let other = generate_dataset(&DatasetSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(bits(&a), bits(&other));
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let mut spec = small_spec();
        spec.shift.noise_sigma_target = 0.8;
        spec.shift.intensity_offset = 0.5;
        let ds = generate_dataset(&spec).unwrap();
        for x in ds.source.iter().chain(&ds.target_train).chain(&ds.target_test) {
            assert!(x.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
