use rand::Rng;

use super::{Domain, Image, Label, LabeledImage};
use crate::error::{Error, Result};

const ERASE_PROB: f64 = 0.5;
const ERASE_SIDE: (usize, usize) = (4, 8);
const JITTER_PROB: f64 = 0.5;
const JITTER_RANGE: (f64, f64) = (0.8, 1.2);

/// Zeroes the `side`×`side` square whose top-left corner is `(row, col)`,
/// truncated at the image border.
pub fn erase_square(img: &mut Image, row: usize, col: usize, side: usize) {
    let n = img.side();
    for r in row..(row + side).min(n) {
        for c in col..(col + side).min(n) {
            img.set(r, c, 0.0);
        }
    }
}

/// Multiplies every pixel by `factor` and clamps to `[0, 1]`.
pub fn jitter_intensity(img: &mut Image, factor: f64) {
    for p in img.pixels_mut() {
        *p = (*p * factor).clamp(0.0, 1.0);
    }
}

/// Source-only augmentation: square erasing and intensity jitter, each with
/// probability one half.
pub fn augment_source<R: Rng + ?Sized>(img: &LabeledImage, rng: &mut R) -> Result<LabeledImage> {
    if img.domain != Domain::Source {
        return Err(Error::TargetAugmentation);
    }
    let mut out = img.clone();
    let n = out.image.side();
    if rng.random_bool(ERASE_PROB) {
        let side = rng.random_range(ERASE_SIDE.0..=ERASE_SIDE.1).min(n);
        let row = rng.random_range(0..=n - side);
        let col = rng.random_range(0..=n - side);
        erase_square(&mut out.image, row, col, side);
    }
    if rng.random_bool(JITTER_PROB) {
        let factor = rng.random_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        jitter_intensity(&mut out.image, factor);
    }
    out.augmented = true;
    Ok(out)
}

/// Exact `side`×`side` sub-window anchored at `(row, col)`.
pub fn crop(img: &Image, row: usize, col: usize, side: usize) -> Result<Image> {
    let n = img.side();
    if side == 0 || row + side > n || col + side > n {
        return Err(Error::InvalidArgument(format!(
            "crop {side}x{side} at ({row}, {col}) exceeds {n}x{n} image"
        )));
    }
    let mut pixels = Vec::with_capacity(side * side);
    for r in row..row + side {
        let start = r * n + col;
        pixels.extend_from_slice(&img.pixels()[start..start + side]);
    }
    Image::new(side, pixels)
}

/// Anchors (row, col) of the five test crops in fixed order: top-left,
/// top-right, bottom-left, bottom-right, center.
pub fn five_crop_anchors(image_side: usize, crop_side: usize) -> Result<[(usize, usize); 5]> {
    if crop_side == 0 || crop_side > image_side {
        return Err(Error::InvalidArgument(format!(
            "crop side {crop_side} must be in 1..={image_side}"
        )));
    }
    let far = image_side - crop_side;
    let mid = far / 2;
    Ok([(0, 0), (0, far), (far, 0), (far, far), (mid, mid)])
}

pub fn five_crops(img: &Image, crop_side: usize) -> Result<[Image; 5]> {
    let anchors = five_crop_anchors(img.side(), crop_side)?;
    let crops = anchors.map(|(r, c)| crop(img, r, c, crop_side));
    let [a, b, c, d, e] = crops;
    Ok([a?, b?, c?, d?, e?])
}

pub fn center_crop(img: &Image, crop_side: usize) -> Result<Image> {
    let [.., center] = five_crop_anchors(img.side(), crop_side)?;
    crop(img, center.0, center.1, crop_side)
}

pub fn random_crop<R: Rng + ?Sized>(img: &Image, crop_side: usize, rng: &mut R) -> Result<Image> {
    if crop_side == 0 || crop_side > img.side() {
        return Err(Error::InvalidArgument(format!(
            "crop side {crop_side} must be in 1..={}",
            img.side()
        )));
    }
    let far = img.side() - crop_side;
    let row = rng.random_range(0..=far);
    let col = rng.random_range(0..=far);
    crop(img, row, col, crop_side)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub crop_side: usize,
    /// Apply [`augment_source`] to source items.
    pub augment: bool,
}

/// One training step's worth of cropped images.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub source: Vec<LabeledImage>,
    /// Labels are replaced by [`Label::Hidden`].
    pub target: Vec<LabeledImage>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn source_item<R: Rng + ?Sized>(
    item: &LabeledImage,
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<LabeledImage> {
    let mut item = if opts.augment {
        augment_source(item, rng)?
    } else {
        item.clone()
    };
    item.image = random_crop(&item.image, opts.crop_side, rng)?;
    Ok(item)
}

/// Samples `batch_size` items with replacement from each domain. Source items
/// are augmented and randomly cropped; target items are only center-cropped.
pub fn make_batch<R: Rng + ?Sized>(
    source: &[LabeledImage],
    target: &[LabeledImage],
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Batch> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("batch sampling from an empty set".into()));
    }
    let mut batch = make_source_batch(source, opts, rng)?;
    batch.target = (0..opts.batch_size)
        .map(|_| {
            let item = &target[rng.random_range(0..target.len())];
            Ok(LabeledImage {
                image: center_crop(&item.image, opts.crop_side)?,
                label: Label::Hidden,
                domain: item.domain,
                augmented: item.augmented,
            })
        })
        .collect::<Result<_>>()?;
    Ok(batch)
}

/// Source half of [`make_batch`]; the target half is left empty.
pub fn make_source_batch<R: Rng + ?Sized>(
    source: &[LabeledImage],
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Batch> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("batch sampling from an empty set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let source = (0..opts.batch_size)
        .map(|_| source_item(&source[rng.random_range(0..source.len())], opts, rng))
        .collect::<Result<_>>()?;
    Ok(Batch {
        source,
        target: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled(img: Image, domain: Domain) -> LabeledImage {
        LabeledImage::new(img, Label::Class(0), domain)
    }

    #[test]
    fn erase_corner_square_zeroes_sixteen_pixels() {
        let mut img = Image::filled(32, 1.0);
        erase_square(&mut img, 0, 0, 4);
        let zeros = img.pixels().iter().filter(|&&p| p == 0.0).count();
        assert_eq!(zeros, 16);
        assert_eq!(img.get(3, 3), 0.0);
        assert_eq!(img.get(4, 0), 1.0);
    }

    #[test]
    fn unit_jitter_is_identity() {
        let spec = DatasetSpec::default();
        let ds = generate_dataset(&DatasetSpec {
            samples_per_class_source: 1,
            samples_per_class_target: 1,
            ..spec
        })
        .unwrap();
        let mut img = ds.source[0].image.clone();
        jitter_intensity(&mut img, 1.0);
        assert_eq!(img, ds.source[0].image);
    }

    #[test]
    fn zero_image_is_a_fixed_point_of_augmentation() {
        let img = labeled(Image::filled(32, 0.0), Domain::Source);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let out = augment_source(&img, &mut rng).unwrap();
            assert!(out.image.pixels().iter().all(|&p| p == 0.0));
            assert_eq!(out.label, img.label);
        }
    }

    #[test]
    fn augmentation_rejects_target_images() {
        let img = labeled(Image::filled(32, 0.5), Domain::Target);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            augment_source(&img, &mut rng),
            Err(Error::TargetAugmentation)
        ));
    }

    #[test]
    fn augmentation_erases_or_jitters_within_bounds() {
        let img = labeled(Image::filled(32, 0.9), Domain::Source);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut saw_erase = false;
        let mut saw_jitter = false;
        for _ in 0..200 {
            let out = augment_source(&img, &mut rng).unwrap();
            let zeros = out.image.pixels().iter().filter(|&&p| p == 0.0).count();
            if zeros > 0 {
                saw_erase = true;
                let side = (zeros as f64).sqrt() as usize;
                assert_eq!(side * side, zeros);
                assert!((4..=8).contains(&side));
            }
            let nonzero: Vec<f64> = out.image.pixels().iter().copied().filter(|&p| p > 0.0).collect();
            let v = nonzero[0];
            assert!(nonzero.iter().all(|&p| p == v));
            if v != 0.9 {
                saw_jitter = true;
                assert!((0.9 * 0.8 - 1e-12..=1.0).contains(&v));
            }
        }
        assert!(saw_erase && saw_jitter);
    }

    #[test]
    fn five_crop_anchors_for_default_sizes() {
        assert_eq!(
            five_crop_anchors(32, 28).unwrap(),
            [(0, 0), (0, 4), (4, 0), (4, 4), (2, 2)]
        );
        assert!(five_crop_anchors(32, 33).is_err());
    }

    #[test]
    fn full_size_crops_are_the_input() {
        let ds = generate_dataset(&DatasetSpec {
            samples_per_class_source: 1,
            samples_per_class_target: 1,
            ..DatasetSpec::default()
        })
        .unwrap();
        let img = &ds.source[3].image;
        for c in five_crops(img, 32).unwrap() {
            assert_eq!(&c, img);
        }
    }

    #[test]
    fn constant_image_crops_are_constant() {
        let img = Image::filled(32, 0.37);
        for c in five_crops(&img, 28).unwrap() {
            assert_eq!(c.side(), 28);
            assert!(c.pixels().iter().all(|&p| p == 0.37));
        }
    }

    fn slice_oracle(img: &Image, row: usize, col: usize, side: usize) -> Vec<f64> {
        let mut out = vec![];
        for r in 0..side {
            for c in 0..side {
                out.push(img.pixels()[(row + r) * img.side() + (col + c)]);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn five_crops_are_exact_subwindows(
            side in 1usize..20,
            crop_frac in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let crop_side = ((side as f64 * crop_frac).ceil() as usize).clamp(1, side);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels = (0..side * side).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let img = Image::new(side, pixels).unwrap();
            let crops = five_crops(&img, crop_side).unwrap();
            prop_assert_eq!(crops.len(), 5);
            let far = side - crop_side;
            let anchors = [(0, 0), (0, far), (far, 0), (far, far), (far / 2, far / 2)];
            for (c, (r0, c0)) in crops.iter().zip(anchors) {
                prop_assert_eq!(c.pixels(), &slice_oracle(&img, r0, c0, crop_side)[..]);
            }
        }

        #[test]
        fn augmentation_preserves_unit_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels = (0..32 * 32).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let img = labeled(Image::new(32, pixels).unwrap(), Domain::Source);
            let out = augment_source(&img, &mut rng).unwrap();
            prop_assert!(out.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    fn tiny_dataset() -> crate::data::Dataset {
        generate_dataset(&DatasetSpec {
            samples_per_class_source: 3,
            samples_per_class_target: 3,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn batch_has_equal_halves_and_untouched_targets() {
        let ds = tiny_dataset();
        let opts = BatchOptions {
            batch_size: 64,
            crop_side: 28,
            augment: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = make_batch(&ds.source, &ds.target_train, &opts, &mut rng).unwrap();
        assert_eq!(batch.source.len(), 64);
        assert_eq!(batch.target.len(), 64);
        assert_eq!(batch.len(), 128);
        assert!(batch.source.iter().all(|x| x.augmented && x.domain == Domain::Source));
        assert!(batch
            .target
            .iter()
            .all(|x| !x.augmented && x.domain == Domain::Target && x.label == Label::Hidden));
        assert!(batch.source.iter().chain(&batch.target).all(|x| x.image.side() == 28));
        // target crops are exactly center crops of some target-train image
        for t in &batch.target {
            assert!(ds
                .target_train
                .iter()
                .any(|x| center_crop(&x.image, 28).unwrap() == t.image));
        }
    }

    #[test]
    fn single_item_batch() {
        let ds = tiny_dataset();
        let opts = BatchOptions {
            batch_size: 1,
            crop_side: 28,
            augment: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = make_batch(&ds.source, &ds.target_train, &opts, &mut rng).unwrap();
        assert_eq!((batch.source.len(), batch.target.len()), (1, 1));
    }

    #[test]
    fn batches_are_deterministic_per_rng_state() {
        let ds = tiny_dataset();
        let opts = BatchOptions {
            batch_size: 16,
            crop_side: 28,
            augment: true,
        };
        let a = make_batch(&ds.source, &ds.target_train, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_batch(&ds.source, &ds.target_train, &opts, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_requires_both_domains() {
        let ds = tiny_dataset();
        let opts = BatchOptions {
            batch_size: 4,
            crop_side: 28,
            augment: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_batch(&ds.source, &[], &opts, &mut rng).is_err());
        assert!(make_batch(&[], &ds.target_train, &opts, &mut rng).is_err());
    }
}
