use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSpec, Domain, Image};

const POSITION_JITTER: f64 = 0.75;
const AMPLITUDE_RANGE: (f64, f64) = (0.8, 1.0);
const WIDTH_RANGE: (f64, f64) = (0.9, 1.1);

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, class: usize, draw: u64, stream: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ class as u64);
    h = splitmix(h ^ draw);
    splitmix(h ^ stream)
}

/// Renders draw `draw` of `class` as seen in `domain`.
///
/// Blob geometry (position jitter, amplitude, width) depends only on
/// `(seed, class, draw)`, so a target rendering with an identity shift and no
/// noise equals the source rendering of the same draw. Noise comes from a
/// separate per-domain stream.
pub fn render(spec: &DatasetSpec, class: usize, draw: u64, domain: Domain) -> Image {
    let side = spec.image_side;
    let mut geometry = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, class, draw, 0));
    let jitter_x = geometry.random_range(-POSITION_JITTER..=POSITION_JITTER);
    let jitter_y = geometry.random_range(-POSITION_JITTER..=POSITION_JITTER);
    let amplitude = geometry.random_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1);
    let width = spec.blob_sigma * geometry.random_range(WIDTH_RANGE.0..=WIDTH_RANGE.1);

    let center = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 3.0;
    let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.total_classes as f64;
    let mut cx = center + radius * angle.cos() + jitter_x;
    let cy = center + radius * angle.sin() + jitter_y;

    let (scale, offset, sigma, stream) = match domain {
        Domain::Source => (1.0, 0.0, spec.shift.noise_sigma_source, 1),
        Domain::Target => {
            cx += spec.shift.blob_translation as f64;
            (
                spec.shift.intensity_scale,
                spec.shift.intensity_offset,
                spec.shift.noise_sigma_target,
                2,
            )
        }
    };

    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, class, draw, stream));
    let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("validated sigma"));
    let denom = 2.0 * width * width;

    let mut img = Image::filled(side, 0.0);
    for row in 0..side {
        let dy = row as f64 - cy;
        for col in 0..side {
            let dx = col as f64 - cx;
            let mut v = amplitude * (-(dx * dx + dy * dy) / denom).exp();
            if domain == Domain::Target {
                v = v * scale + offset;
            }
            if let Some(n) = &noise {
                v += n.sample(&mut noise_rng);
            }
            img.set(row, col, v.clamp(0.0, 1.0));
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DomainShift;

    #[test]
    fn identity_shift_reproduces_source_rendering() {
        let spec = DatasetSpec {
            shift: DomainShift::identity(),
            ..DatasetSpec::default()
        };
        for class in 0..spec.shared_classes {
            for draw in [0u64, 7, 123] {
                let s = render(&spec, class, draw, Domain::Source);
                let t = render(&spec, class, draw, Domain::Target);
                assert_eq!(s, t);
            }
        }
    }

    #[test]
    fn zero_target_noise_matches_noiseless_source_draw() {
        let spec = DatasetSpec {
            shift: DomainShift::identity(),
            ..DatasetSpec::default()
        };
        let t = render(&spec, 2, 5, Domain::Target);
        let s = render(&spec, 2, 5, Domain::Source);
        assert_eq!(t.pixels(), s.pixels());
    }

    #[test]
    fn blob_peak_sits_on_class_circle() {
        let spec = DatasetSpec {
            shift: DomainShift::identity(),
            ..DatasetSpec::default()
        };
        let side = spec.image_side as f64;
        for class in 0..spec.total_classes {
            let img = render(&spec, class, 0, Domain::Source);
            let (idx, _) = img
                .pixels()
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            let (row, col) = (idx / spec.image_side, idx % spec.image_side);
            let angle = 2.0 * std::f64::consts::PI * class as f64 / spec.total_classes as f64;
            let ex = (side - 1.0) / 2.0 + side / 3.0 * angle.cos();
            let ey = (side - 1.0) / 2.0 + side / 3.0 * angle.sin();
            assert!((col as f64 - ex).abs() <= 1.5, "class {class}");
            assert!((row as f64 - ey).abs() <= 1.5, "class {class}");
        }
    }

    #[test]
    fn translation_moves_blob_right() {
        let mut spec = DatasetSpec {
            shift: DomainShift::identity(),
            ..DatasetSpec::default()
        };
        spec.shift.blob_translation = 3;
        let s = render(&spec, 0, 1, Domain::Source);
        let t = render(&spec, 0, 1, Domain::Target);
        // column shift of exactly 3 on the integer grid
        for row in 0..spec.image_side {
            for col in 3..spec.image_side {
                assert!((t.get(row, col) - s.get(row, col - 3)).abs() < 1e-12);
            }
        }
    }
}
