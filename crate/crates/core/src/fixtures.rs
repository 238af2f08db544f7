//! Deterministic synthetic test instances with known clean labels.
//!
//! Each fixture is generated from a ChaCha8 stream cipher RNG keyed by the
//! seed, with draws in a fixed order (clean structure, image noise, flip
//! positions, flip targets), so identical seeds reproduce identical triples
//! on every platform.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{builtin_palette, ImageTensor, LabelMap};

/// Gaussian noise sigma added to the per-class base colors; strong enough
/// that the appearance kernel carries real signal, weak enough that classes
/// stay visually separated.
pub const IMAGE_NOISE_SIGMA: f64 = 0.05;

/// Which synthetic scene to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Two-class map of smooth random regions (thresholded smoothed noise),
    /// colored with the `city_binary` palette.
    BinaryBlobs,
    /// Six-class rectangular mosaic colored with the `potsdam` palette.
    PotsdamMosaic,
}

impl FixtureKind {
    /// Name of the builtin palette whose colors the fixture image uses.
    pub fn palette_name(&self) -> &'static str {
        match self {
            FixtureKind::BinaryBlobs => "city_binary",
            FixtureKind::PotsdamMosaic => "potsdam",
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            FixtureKind::BinaryBlobs => 2,
            FixtureKind::PotsdamMosaic => 6,
        }
    }
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary_blobs" => Ok(FixtureKind::BinaryBlobs),
            "potsdam_mosaic" => Ok(FixtureKind::PotsdamMosaic),
            _ => Err(Error::InvalidParameter(format!(
                "unknown fixture kind '{s}' (expected 'binary_blobs' or 'potsdam_mosaic')"
            ))),
        }
    }
}

/// A generated scene: appearance image, clean labels, and a noisy copy with
/// exactly `round(noise_rate * N)` pixels flipped to wrong classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub image: ImageTensor,
    pub clean: LabelMap,
    pub noisy: LabelMap,
}

/// Generates a fixture. `height` and `width` must be at least 8 and
/// `noise_rate` in `[0, 1)`. Flip targets are always a different class, so
/// `evaluate(noisy, clean)` scores exactly `1 - flips / N`.
pub fn gen_fixture(
    kind: FixtureKind,
    height: usize,
    width: usize,
    noise_rate: f64,
    seed: u64,
) -> Result<Fixture> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidParameter(format!(
            "fixture dimensions must be at least 8x8, got {height}x{width}"
        )));
    }
    if !noise_rate.is_finite() || !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::InvalidParameter(format!(
            "noise rate {noise_rate} must lie in [0, 1)"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = kind.num_classes();

    let clean_labels = match kind {
        FixtureKind::BinaryBlobs => blob_labels(height, width, &mut rng),
        FixtureKind::PotsdamMosaic => mosaic_labels(height, width, &mut rng),
    };
    let clean = LabelMap::new(height, width, num_classes, clean_labels)?;

    let image = render_image(kind, &clean, &mut rng)?;

    let n = height * width;
    let flips = (noise_rate * n as f64).round() as usize;
    let mut noisy_labels = clean.labels().to_vec();
    let positions = rand::seq::index::sample(&mut rng, n, flips);
    for i in positions {
        let old = noisy_labels[i];
        // Uniform draw over the L-1 wrong classes.
        let r = rng.random_range(0..num_classes as u32 - 1);
        noisy_labels[i] = if r >= old { r + 1 } else { r };
    }
    let noisy = LabelMap::new(height, width, num_classes, noisy_labels)?;

    Ok(Fixture { image, clean, noisy })
}

/// Smooth two-class regions: white noise blurred with a separable Gaussian
/// and thresholded at zero.
fn blob_labels(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let field: Vec<f64> = (0..height * width).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let sigma = (height.min(width) as f64 / 8.0).max(1.0);
    let smoothed = gaussian_blur(&field, height, width, sigma);
    smoothed.iter().map(|&v| (v > 0.0) as u32).collect()
}

/// Separable Gaussian blur with kernel renormalization at the borders.
fn gaussian_blur(field: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();

    let convolve_rows = |input: &[f64], h: usize, w: usize| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let cc = c as i64 + ki as i64 - radius;
                    if cc >= 0 && (cc as usize) < w {
                        acc += k * input[r * w + cc as usize];
                        weight += k;
                    }
                }
                out[r * w + c] = acc / weight;
            }
        }
        out
    };

    let horizontal = convolve_rows(field, height, width);
    // Transpose, convolve rows again, transpose back.
    let mut transposed = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            transposed[c * height + r] = horizontal[r * width + c];
        }
    }
    let vertical = convolve_rows(&transposed, width, height);
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            out[r * width + c] = vertical[c * height + r];
        }
    }
    out
}

/// Rectangular mosaic of cells with random classes; the first six cells get
/// a shuffled permutation of all classes so every class appears whenever the
/// grid has at least six cells (always true for 32x32 and larger).
fn mosaic_labels(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let cell_h = (height / 8).max(4);
    let cell_w = (width / 8).max(4);
    let cells_y = height.div_ceil(cell_h);
    let cells_x = width.div_ceil(cell_w);
    let total_cells = cells_y * cells_x;

    let mut cell_classes: Vec<u32> = Vec::with_capacity(total_cells);
    if total_cells >= 6 {
        let mut first: Vec<u32> = (0..6).collect();
        first.shuffle(rng);
        cell_classes.extend_from_slice(&first);
    }
    while cell_classes.len() < total_cells {
        cell_classes.push(rng.random_range(0..6));
    }

    let mut labels = vec![0u32; height * width];
    for r in 0..height {
        for c in 0..width {
            let cell = (r / cell_h) * cells_x + c / cell_w;
            labels[r * width + c] = cell_classes[cell];
        }
    }
    labels
}

/// Per-class base color plus clamped Gaussian pixel noise.
fn render_image(kind: FixtureKind, clean: &LabelMap, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let palette = builtin_palette(kind.palette_name())?;
    let base: Vec<[f64; 3]> = palette
        .entries()
        .iter()
        .map(|(_, [r, g, b])| [*r as f64 / 255.0, *g as f64 / 255.0, *b as f64 / 255.0])
        .collect();
    let noise = Normal::new(0.0, IMAGE_NOISE_SIGMA)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let mut data = Vec::with_capacity(clean.pixel_count() * 3);
    for &label in clean.labels() {
        for &channel in &base[label as usize] {
            let v: f64 = channel + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    ImageTensor::new(clean.height(), clean.width(), 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_noise_keeps_labels_clean() {
        let fixture = gen_fixture(FixtureKind::BinaryBlobs, 16, 16, 0.0, 3).unwrap();
        assert_eq!(fixture.clean, fixture.noisy);
    }

    #[test]
    fn flip_count_is_exact() {
        let fixture = gen_fixture(FixtureKind::BinaryBlobs, 64, 64, 0.1, 5).unwrap();
        let flips = fixture
            .clean
            .labels()
            .iter()
            .zip(fixture.noisy.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flips, 410, "round(0.1 * 4096) = 410");
    }

    #[test]
    fn noisy_accuracy_matches_rate_exactly() {
        for (kind, rate) in [
            (FixtureKind::BinaryBlobs, 0.1),
            (FixtureKind::PotsdamMosaic, 0.15),
        ] {
            let fixture = gen_fixture(kind, 32, 48, rate, 7).unwrap();
            let report = evaluate(&fixture.noisy, &fixture.clean).unwrap();
            let n = 32.0 * 48.0;
            let expected = (n - (rate * n).round()) / n;
            assert_abs_diff_eq!(report.pixel_accuracy(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn same_seed_reproduces_identical_triples() {
        for kind in [FixtureKind::BinaryBlobs, FixtureKind::PotsdamMosaic] {
            let a = gen_fixture(kind, 32, 32, 0.2, 42).unwrap();
            let b = gen_fixture(kind, 32, 32, 0.2, 42).unwrap();
            assert_eq!(a, b);
        }
        let a = gen_fixture(FixtureKind::BinaryBlobs, 16, 16, 0.1, 1).unwrap();
        let b = gen_fixture(FixtureKind::BinaryBlobs, 16, 16, 0.1, 2).unwrap();
        assert_ne!(a, b, "different seeds should differ");
    }

    #[test]
    fn mosaic_covers_all_six_classes_at_32() {
        for seed in 0..5 {
            let fixture = gen_fixture(FixtureKind::PotsdamMosaic, 32, 32, 0.0, seed).unwrap();
            let mut seen = [false; 6];
            for &l in fixture.clean.labels() {
                seen[l as usize] = true;
            }
            assert!(seen.iter().all(|s| *s), "seed {seed} missing a class");
        }
    }

    #[test]
    fn blobs_have_both_classes_and_smooth_structure() {
        let fixture = gen_fixture(FixtureKind::BinaryBlobs, 64, 64, 0.0, 11).unwrap();
        let labels = fixture.clean.labels();
        let ones = labels.iter().filter(|l| **l == 1).count();
        assert!(ones > 64 && ones < 4032, "degenerate blob split: {ones}");

        // Smoothness: the large majority of 4-neighbor pairs agree.
        let mut agree = 0usize;
        let mut total = 0usize;
        for r in 0..64 {
            for c in 0..63 {
                agree += (labels[r * 64 + c] == labels[r * 64 + c + 1]) as usize;
                total += 1;
            }
        }
        assert!(agree as f64 / total as f64 > 0.9, "blobs too fragmented");
    }

    #[test]
    fn image_values_stay_in_range_and_track_classes() {
        let fixture = gen_fixture(FixtureKind::PotsdamMosaic, 32, 32, 0.0, 13).unwrap();
        assert!(fixture.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // A building pixel (blue) must have a dominant blue channel.
        if let Some(i) = fixture.clean.labels().iter().position(|&l| l == 3) {
            let px = fixture.image.pixel(i);
            assert!(px[2] > 0.7 && px[0] < 0.3, "building pixel should be blue: {px:?}");
        }
    }

    #[test]
    fn invalid_arguments_are_rejected() {
        assert!(gen_fixture(FixtureKind::BinaryBlobs, 4, 16, 0.1, 0).is_err());
        assert!(gen_fixture(FixtureKind::BinaryBlobs, 16, 16, 1.0, 0).is_err());
        assert!(gen_fixture(FixtureKind::BinaryBlobs, 16, 16, -0.1, 0).is_err());
        assert!("nope".parse::<FixtureKind>().is_err());
        assert_eq!("binary_blobs".parse::<FixtureKind>().unwrap(), FixtureKind::BinaryBlobs);
    }
}
