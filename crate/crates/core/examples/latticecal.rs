//! Scratch calibration probe: ratio of fast vs brute all-ones responses
//! across density regimes and lattice configurations. Not a deliverable.

use segcrf::filter::{
    brute_force_filter, make_bilateral_features, make_spatial_features, FeatureField,
    PermutohedralLattice,
};
use segcrf::model::ImageTensor;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn ratio_stats(features: &FeatureField, passes: usize, halo: usize) -> (f64, f64, f64, usize) {
    let n = features.pixel_count();
    let ones = vec![1.0; n];
    let lattice = PermutohedralLattice::with_config(features, passes, halo);
    let fast = lattice.filter_channel(&ones);
    let brute = brute_force_filter(&ones, 1, features).unwrap();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (f, b) in fast.iter().zip(&brute) {
        let r = f / b;
        min = min.min(r);
        max = max.max(r);
        sum += r;
    }
    (min, sum / n as f64, max, lattice.vertex_count())
}

fn main() {
    let configs = [(1usize, 0usize), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3), (4, 2), (4, 3)];

    println!("=== spatial d=2, 16x16 theta=3 ===");
    let f = make_spatial_features(16, 16, 3.0).unwrap();
    for (p, h) in configs {
        let (lo, mean, hi, m) = ratio_stats(&f, p, h);
        println!("passes={p} halo={h}: min={lo:.4} mean={mean:.4} max={hi:.4} vertices={m}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);

    println!("=== bilateral d=5, 16x16 random image ta=8 tb=0.25 ===");
    let data: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random::<f64>()).collect();
    let img = ImageTensor::new(16, 16, 3, data).unwrap();
    let f = make_bilateral_features(&img, 8.0, 0.25).unwrap();
    for (p, h) in configs {
        let (lo, mean, hi, m) = ratio_stats(&f, p, h);
        println!("passes={p} halo={h}: min={lo:.4} mean={mean:.4} max={hi:.4} vertices={m}");
    }

    println!("=== bilateral d=5, 32x32 smooth image ta=8 tb=0.1 ===");
    let data: Vec<f64> = (0..32 * 32 * 3)
        .map(|i| {
            let p = i / 3;
            let (r, c) = (p / 32, p % 32);
            let base = if (r / 8 + c / 8) % 2 == 0 { 0.2 } else { 0.8 };
            (base + 0.05 * rng.random::<f64>()).clamp(0.0, 1.0)
        })
        .collect();
    let img = ImageTensor::new(32, 32, 3, data).unwrap();
    let f = make_bilateral_features(&img, 8.0, 0.1).unwrap();
    for (p, h) in configs {
        let (lo, mean, hi, m) = ratio_stats(&f, p, h);
        println!("passes={p} halo={h}: min={lo:.4} mean={mean:.4} max={hi:.4} vertices={m}");
    }

    println!("=== bilateral d=5, 32x32 random image ta=80 tb=0.05 (hardest) ===");
    let data: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect();
    let img = ImageTensor::new(32, 32, 3, data).unwrap();
    let f = make_bilateral_features(&img, 80.0, 0.05).unwrap();
    for (p, h) in configs {
        let (lo, mean, hi, m) = ratio_stats(&f, p, h);
        println!("passes={p} halo={h}: min={lo:.4} mean={mean:.4} max={hi:.4} vertices={m}");
    }
}
