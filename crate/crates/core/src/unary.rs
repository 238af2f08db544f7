//! Unary potential construction.
//!
//! Negative log-probability costs per pixel and class, either from a hard
//! initial labeling plus a scalar confidence `p`, or from externally
//! supplied soft per-class probabilities.

use crate::error::{Error, Result};
use crate::model::{LabelMap, MarginalField, UnaryField};

/// Default floor for soft probabilities, keeping `-ln(q)` below ~18.5.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-8;

/// Builds unaries from a hard label map.
///
/// The observed label gets probability `p`; the residual mass `1 - p` is
/// split uniformly over the other `L - 1` classes, so the costs are
/// `-ln(p)` and `-ln((1 - p) / (L - 1))`. `p` must lie strictly inside
/// `(1/L, 1)` so that the observed label stays the per-pixel argmin.
pub fn unary_from_labels(labels: &LabelMap, p: f64) -> Result<UnaryField> {
    let num_classes = labels.num_classes();
    if !p.is_finite() || p <= 1.0 / num_classes as f64 || p >= 1.0 {
        return Err(Error::ConfidenceOutOfRange { p, num_classes });
    }
    let hit_cost = -p.ln();
    let miss_cost = -((1.0 - p) / (num_classes - 1) as f64).ln();
    let mut costs = vec![miss_cost; labels.pixel_count() * num_classes];
    for (i, &label) in labels.labels().iter().enumerate() {
        costs[i * num_classes + label as usize] = hit_cost;
    }
    UnaryField::new(labels.height(), labels.width(), num_classes, costs)
}

/// Builds unaries from soft per-class probabilities as `-ln(max(q, floor))`.
///
/// The floor keeps costs finite when a class has zero probability.
pub fn unary_from_probabilities(probs: &MarginalField, floor: f64) -> Result<UnaryField> {
    if !floor.is_finite() || floor <= 0.0 || floor >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "probability floor {floor} must lie in (0, 1)"
        )));
    }
    let costs = probs.values().iter().map(|&q| -q.max(floor).ln()).collect();
    UnaryField::new(probs.height(), probs.width(), probs.num_classes(), costs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn map_of(labels: Vec<u32>, num_classes: usize) -> LabelMap {
        LabelMap::new(1, labels.len(), num_classes, labels).unwrap()
    }

    #[test]
    fn binary_costs_at_p70() {
        let unary = unary_from_labels(&map_of(vec![0], 2), 0.70).unwrap();
        assert_abs_diff_eq!(unary.pixel(0)[0], 0.356675, epsilon = 1e-6);
        assert_abs_diff_eq!(unary.pixel(0)[1], 1.203973, epsilon = 1e-6);
    }

    #[test]
    fn binary_costs_at_p95() {
        let unary = unary_from_labels(&map_of(vec![0], 2), 0.95).unwrap();
        assert_abs_diff_eq!(unary.pixel(0)[0], 0.051293, epsilon = 1e-6);
        assert_abs_diff_eq!(unary.pixel(0)[1], 2.995732, epsilon = 1e-6);
    }

    #[test]
    fn six_class_costs_split_residual_uniformly() {
        let unary = unary_from_labels(&map_of(vec![3], 6), 0.9).unwrap();
        let px = unary.pixel(0);
        assert_abs_diff_eq!(px[3], 0.105361, epsilon = 1e-6);
        for l in [0, 1, 2, 4, 5] {
            assert_abs_diff_eq!(px[l], 3.912023, epsilon = 1e-6);
        }
    }

    #[test]
    fn out_of_range_confidence_is_rejected() {
        let labels = map_of(vec![0, 1], 2);
        assert!(unary_from_labels(&labels, 0.5).is_err());
        assert!(unary_from_labels(&labels, 1.0).is_err());
        assert!(unary_from_labels(&labels, f64::NAN).is_err());
    }

    #[test]
    fn soft_costs_symmetric_case() {
        let probs = MarginalField::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let unary = unary_from_probabilities(&probs, DEFAULT_PROB_FLOOR).unwrap();
        assert_abs_diff_eq!(unary.pixel(0)[0], 0.693147, epsilon = 1e-6);
        assert_abs_diff_eq!(unary.pixel(0)[1], 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn soft_costs_floor_clamps_zero() {
        let probs = MarginalField::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let unary = unary_from_probabilities(&probs, 1e-8).unwrap();
        assert_abs_diff_eq!(unary.pixel(0)[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(unary.pixel(0)[1], 18.420681, epsilon = 1e-6);
    }

    #[test]
    fn soft_costs_direct_log() {
        let probs = MarginalField::new(1, 1, 2, vec![0.9, 0.1]).unwrap();
        let unary = unary_from_probabilities(&probs, DEFAULT_PROB_FLOOR).unwrap();
        assert_abs_diff_eq!(unary.pixel(0)[0], 0.105361, epsilon = 1e-6);
        assert_abs_diff_eq!(unary.pixel(0)[1], 2.302585, epsilon = 1e-6);
    }

    #[test]
    fn observed_label_is_argmin() {
        for num_classes in [2usize, 3, 6] {
            let labels = map_of((0..num_classes as u32).collect(), num_classes);
            for p in [0.51, 0.7, 0.99] {
                if p <= 1.0 / num_classes as f64 {
                    continue;
                }
                let unary = unary_from_labels(&labels, p).unwrap();
                for i in 0..labels.pixel_count() {
                    let px = unary.pixel(i);
                    let argmin = px
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    assert_eq!(argmin as u32, labels.label(i));
                }
            }
        }
    }

    #[test]
    fn costs_are_monotone_in_confidence() {
        let labels = map_of(vec![1], 3);
        let lo = unary_from_labels(&labels, 0.6).unwrap();
        let hi = unary_from_labels(&labels, 0.9).unwrap();
        assert!(hi.pixel(0)[1] < lo.pixel(0)[1], "observed cost must shrink");
        assert!(hi.pixel(0)[0] > lo.pixel(0)[0], "other costs must grow");
        assert!(hi.pixel(0)[2] > lo.pixel(0)[2]);
    }

    #[test]
    fn softmax_of_negated_costs_recovers_p() {
        for (num_classes, p) in [(2usize, 0.7), (2, 0.95), (6, 0.9), (4, 0.3)] {
            if p <= 1.0 / num_classes as f64 {
                continue;
            }
            let labels = map_of(vec![0], num_classes);
            let unary = unary_from_labels(&labels, p).unwrap();
            let px = unary.pixel(0);
            let z: f64 = px.iter().map(|c| (-c).exp()).sum();
            let q0 = (-px[0]).exp() / z;
            assert_abs_diff_eq!(q0, p, epsilon = 1e-9);
        }
    }
}
