//! Mean-field inference for the dense and grid CRF models.
//!
//! Both models share the update
//!
//! ```text
//! Q'_i(l) ∝ exp(-cost_i(l) - message_i(l))
//! ```
//!
//! applied synchronously to all pixels. For the dense model with Potts
//! compatibility the pairwise message reduces to
//! `message_i(l) = sum_m w_m * (Q_i(l) - F_m(l)_i)` where `F_m(l)` is the
//! normalized Gaussian filter response of class channel `l` under kernel
//! `m`; the `Q_i(l)` term removes the self contribution. The grid model
//! replaces the filtered response by a plain sum over the 4-neighborhood.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{
    make_bilateral_features, make_spatial_features, FeatureField, PermutohedralLattice,
    MAX_FILTER_DIM, NORMALIZER_FLOOR,
};
use crate::model::{
    validate_params, CrfParams, ImageTensor, LabelMap, MarginalField, ModelKind, UnaryField,
};

/// Pixel-count cap for every exact O(N^2) code path (brute-force filtering
/// backend and [`dense_energy`]).
pub const BRUTE_FORCE_PIXEL_LIMIT: usize = 4096;

/// Which Gaussian filter implementation drives the dense update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterBackend {
    /// Permutohedral-lattice approximation; the production path.
    #[default]
    Fast,
    /// Exact O(N^2) summation; only allowed up to
    /// [`BRUTE_FORCE_PIXEL_LIMIT`] pixels. Serves as the reference oracle.
    BruteForce,
}

/// Optional knobs of [`run_inference_with`] beyond the spec'd parameters.
#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    pub backend: FilterBackend,
    /// Blend factor in (0, 1]: `q_next = damping * update + (1 - damping) * q`.
    /// 1.0 (the default) applies the raw synchronous update.
    pub damping: f64,
    /// Stop early once the per-sweep max |ΔQ| drops below this value.
    pub early_exit_delta: Option<f64>,
    /// Evaluate the exact dense energy of the final labeling (small inputs
    /// only; adds an O(N^2) pass).
    pub compute_final_energy: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            backend: FilterBackend::Fast,
            damping: 1.0,
            early_exit_delta: None,
            compute_final_energy: false,
        }
    }
}

/// Convergence diagnostics of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub iterations_run: usize,
    /// Max |ΔQ| over all pixels and classes, one entry per sweep.
    pub per_iteration_max_delta: Vec<f64>,
    /// Exact dense energy of the returned labeling, when requested.
    pub final_energy: Option<f64>,
}

/// Softmax of the negated unary costs:
/// `Q_i(l) = exp(-cost_i(l)) / sum_l' exp(-cost_i(l'))`.
pub fn init_marginals(unary: &UnaryField) -> MarginalField {
    let num_classes = unary.num_classes();
    let mut q = vec![0.0f64; unary.pixel_count() * num_classes];
    q.par_chunks_mut(num_classes)
        .zip(unary.costs().par_chunks(num_classes))
        .for_each(|(out, costs)| softmax_neg(costs, out));
    MarginalField::new(unary.height(), unary.width(), num_classes, q)
        .expect("softmax output is normalized")
}

/// Writes `softmax(-v)` into `out`, shifted by the minimum for stability.
fn softmax_neg(v: &[f64], out: &mut [f64]) {
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &c) in out.iter_mut().zip(v) {
        let e = (-(c - min)).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// One Gaussian kernel with its normalizer (response to all-ones), behind
/// either filtering backend.
enum KernelFilter {
    Lattice { lattice: PermutohedralLattice, norm: Vec<f64> },
    Brute { features: FeatureField, norm: Vec<f64> },
}

impl KernelFilter {
    fn build(features: FeatureField, backend: FilterBackend) -> Result<Self> {
        let n = features.pixel_count();
        match backend {
            FilterBackend::Fast => {
                if features.dim() > MAX_FILTER_DIM {
                    return Err(Error::InvalidParameter(format!(
                        "feature dimension {} exceeds the supported bound {MAX_FILTER_DIM}",
                        features.dim()
                    )));
                }
                let lattice = PermutohedralLattice::new(&features);
                let norm = lattice.filter_channel(&vec![1.0; n]);
                Self::check_norm(&norm)?;
                Ok(Self::Lattice { lattice, norm })
            }
            FilterBackend::BruteForce => {
                if n > BRUTE_FORCE_PIXEL_LIMIT {
                    return Err(Error::TooLarge(format!(
                        "{n} pixels exceed the {BRUTE_FORCE_PIXEL_LIMIT}-pixel guard \
                         of the brute-force filtering path"
                    )));
                }
                let norm = crate::filter::brute_force_filter(&vec![1.0; n], 1, &features)?;
                Self::check_norm(&norm)?;
                Ok(Self::Brute { features, norm })
            }
        }
    }

    fn check_norm(norm: &[f64]) -> Result<()> {
        if let Some((i, v)) = norm.iter().enumerate().find(|(_, v)| **v < NORMALIZER_FLOOR) {
            return Err(Error::Numerical(format!(
                "filter normalizer {v} at pixel {i} below {NORMALIZER_FLOOR}"
            )));
        }
        Ok(())
    }

    /// Normalized filter response of `channels` interleaved value channels.
    fn apply_normalized(&self, values: &[f64], channels: usize) -> Result<Vec<f64>> {
        let (mut out, norm) = match self {
            Self::Lattice { lattice, norm } => {
                (lattice.filter_interleaved(values, channels), norm)
            }
            Self::Brute { features, norm } => {
                (crate::filter::brute_force_filter(values, channels, features)?, norm)
            }
        };
        for (chunk, &n) in out.chunks_exact_mut(channels).zip(norm.iter()) {
            for v in chunk {
                *v /= n;
            }
        }
        Ok(out)
    }
}

/// The two weighted kernels of the dense model, prebuilt so that one
/// construction serves every sweep.
struct DenseFilters {
    /// (weight, filter); kernels with zero weight are dropped.
    kernels: Vec<(f64, KernelFilter)>,
    num_classes: usize,
}

impl DenseFilters {
    fn build(
        unary: &UnaryField,
        image: &ImageTensor,
        params: &CrfParams,
        backend: FilterBackend,
    ) -> Result<Self> {
        let mut kernels = Vec::new();
        if params.w_appearance > 0.0 {
            let features =
                make_bilateral_features(image, params.theta_alpha, params.theta_beta)?;
            kernels.push((params.w_appearance, KernelFilter::build(features, backend)?));
        }
        if params.w_smoothness > 0.0 {
            let features =
                make_spatial_features(image.height(), image.width(), params.theta_gamma)?;
            kernels.push((params.w_smoothness, KernelFilter::build(features, backend)?));
        }
        Ok(Self { kernels, num_classes: unary.num_classes() })
    }

    /// Computes the Potts message field for the current marginals.
    fn messages(&self, q: &MarginalField) -> Result<Vec<f64>> {
        let num_classes = self.num_classes;
        let mut msg = vec![0.0f64; q.pixel_count() * num_classes];
        for (weight, kernel) in &self.kernels {
            let filtered = kernel.apply_normalized(q.values(), num_classes)?;
            msg.par_iter_mut()
                .zip(q.values().par_iter().zip(filtered.par_iter()))
                .for_each(|(m, (&qv, &fv))| {
                    *m += weight * (qv - fv);
                });
        }
        Ok(msg)
    }
}

/// Applies `Q' = softmax(-(cost + msg))` per pixel, with optional damping
/// toward the previous marginals.
fn apply_update(
    q: &MarginalField,
    unary: &UnaryField,
    msg: &[f64],
    damping: f64,
) -> Result<MarginalField> {
    let num_classes = q.num_classes();
    let mut next = vec![0.0f64; q.values().len()];
    let failure = std::sync::atomic::AtomicUsize::new(usize::MAX);
    next.par_chunks_mut(num_classes)
        .enumerate()
        .for_each(|(i, out)| {
            let costs = unary.pixel(i);
            let m = &msg[i * num_classes..(i + 1) * num_classes];
            let mut min = f64::INFINITY;
            for (c, mv) in costs.iter().zip(m) {
                let v = c + mv;
                if !v.is_finite() {
                    failure.store(i, std::sync::atomic::Ordering::Relaxed);
                    return;
                }
                min = min.min(v);
            }
            let mut z = 0.0;
            for ((o, &c), &mv) in out.iter_mut().zip(costs).zip(m) {
                let e = (-(c + mv - min)).exp();
                *o = e;
                z += e;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
            if damping < 1.0 {
                let prev = q.pixel(i);
                for (o, &p) in out.iter_mut().zip(prev) {
                    *o = damping * *o + (1.0 - damping) * p;
                }
            }
        });
    let failed = failure.load(std::sync::atomic::Ordering::Relaxed);
    if failed != usize::MAX {
        let (r, c) = (failed / q.width(), failed % q.width());
        return Err(Error::Numerical(format!(
            "non-finite update at pixel ({r}, {c})"
        )));
    }
    MarginalField::new(q.height(), q.width(), num_classes, next)
}

fn check_dense_shapes(q: &MarginalField, unary: &UnaryField, image: &ImageTensor) -> Result<()> {
    if q.height() != unary.height()
        || q.width() != unary.width()
        || q.num_classes() != unary.num_classes()
    {
        return Err(Error::ShapeMismatch(format!(
            "marginals {}x{}x{} vs unary {}x{}x{}",
            q.height(), q.width(), q.num_classes(),
            unary.height(), unary.width(), unary.num_classes()
        )));
    }
    if image.height() != unary.height() || image.width() != unary.width() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs unary {}x{}",
            image.height(), image.width(), unary.height(), unary.width()
        )));
    }
    Ok(())
}

/// One synchronous dense-model sweep using the fast filtering backend.
///
/// Rebuilds the filter lattices on every call; use [`run_inference`] for
/// multi-sweep runs, which constructs them once.
pub fn dense_mean_field_step(
    q: &MarginalField,
    unary: &UnaryField,
    image: &ImageTensor,
    params: &CrfParams,
) -> Result<MarginalField> {
    dense_mean_field_step_with(q, unary, image, params, FilterBackend::Fast)
}

/// [`dense_mean_field_step`] with an explicit filtering backend.
pub fn dense_mean_field_step_with(
    q: &MarginalField,
    unary: &UnaryField,
    image: &ImageTensor,
    params: &CrfParams,
    backend: FilterBackend,
) -> Result<MarginalField> {
    let params = validate_params(*params, unary.num_classes())?;
    check_dense_shapes(q, unary, image)?;
    let filters = DenseFilters::build(unary, image, &params, backend)?;
    let msg = filters.messages(q)?;
    apply_update(q, unary, &msg, 1.0)
}

/// One synchronous grid-model sweep: `message_i(l) = w_grid * sum_{j in N4(i)} (1 - Q_j(l))`.
///
/// Boundary pixels use their 2-3 in-range neighbors; there is no wraparound
/// or padding.
pub fn grid_mean_field_step(
    q: &MarginalField,
    unary: &UnaryField,
    params: &CrfParams,
) -> Result<MarginalField> {
    let params = validate_params(*params, unary.num_classes())?;
    if q.height() != unary.height()
        || q.width() != unary.width()
        || q.num_classes() != unary.num_classes()
    {
        return Err(Error::ShapeMismatch(format!(
            "marginals {}x{}x{} vs unary {}x{}x{}",
            q.height(), q.width(), q.num_classes(),
            unary.height(), unary.width(), unary.num_classes()
        )));
    }
    let msg = grid_messages(q, params.w_grid);
    apply_update(q, unary, &msg, 1.0)
}

fn grid_messages(q: &MarginalField, w_grid: f64) -> Vec<f64> {
    let (h, w, num_classes) = (q.height(), q.width(), q.num_classes());
    let values = q.values();
    let mut msg = vec![0.0f64; values.len()];
    msg.par_chunks_mut(w * num_classes)
        .enumerate()
        .for_each(|(row, out_row)| {
            for col in 0..w {
                let neighbors = [
                    (row > 0).then(|| (row - 1) * w + col),
                    (row + 1 < h).then(|| (row + 1) * w + col),
                    (col > 0).then(|| row * w + col - 1),
                    (col + 1 < w).then(|| row * w + col + 1),
                ];
                let out = &mut out_row[col * num_classes..(col + 1) * num_classes];
                for j in neighbors.into_iter().flatten() {
                    let qj = &values[j * num_classes..(j + 1) * num_classes];
                    for (o, &v) in out.iter_mut().zip(qj) {
                        *o += w_grid * (1.0 - v);
                    }
                }
            }
        });
    msg
}

/// Runs `params.iterations` sweeps of the selected model from the unary
/// initialization and returns the final marginals, their per-pixel argmax
/// labeling (ties toward the lowest class index), and a convergence trace.
pub fn run_inference(
    unary: &UnaryField,
    image: &ImageTensor,
    params: &CrfParams,
) -> Result<(MarginalField, LabelMap, InferenceTrace)> {
    run_inference_with(unary, image, params, &InferenceOptions::default())
}

/// [`run_inference`] with backend, damping, early-exit and energy options.
pub fn run_inference_with(
    unary: &UnaryField,
    image: &ImageTensor,
    params: &CrfParams,
    options: &InferenceOptions,
) -> Result<(MarginalField, LabelMap, InferenceTrace)> {
    let params = validate_params(*params, unary.num_classes())?;
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "damping {} must lie in (0, 1]",
            options.damping
        )));
    }
    let mut q = init_marginals(unary);
    check_dense_shapes(&q, unary, image)?;

    let dense_filters = match params.model_kind {
        ModelKind::Dense => Some(DenseFilters::build(unary, image, &params, options.backend)?),
        ModelKind::Grid => None,
    };

    let mut deltas = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        let msg = match &dense_filters {
            Some(filters) => filters.messages(&q)?,
            None => grid_messages(&q, params.w_grid),
        };
        let next = apply_update(&q, unary, &msg, options.damping)?;
        let delta = max_abs_delta(q.values(), next.values());
        deltas.push(delta);
        q = next;
        if let Some(threshold) = options.early_exit_delta {
            if delta < threshold {
                break;
            }
        }
    }

    let labels = q.map_labels();
    let final_energy = if options.compute_final_energy
        && params.model_kind == ModelKind::Dense
        && unary.pixel_count() <= BRUTE_FORCE_PIXEL_LIMIT
    {
        Some(dense_energy(&labels, unary, image, &params)?)
    } else {
        None
    };

    let trace = InferenceTrace {
        iterations_run: deltas.len(),
        per_iteration_max_delta: deltas,
        final_energy,
    };
    Ok((q, labels, trace))
}

fn max_abs_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Exact dense-model energy of a labeling:
/// `E = sum_i cost_i(x_i) + sum_{i<j} [x_i != x_j] * (w_app * k1(i,j) + w_sm * k2(i,j))`.
///
/// Guarded to [`BRUTE_FORCE_PIXEL_LIMIT`] pixels; the pair sum is quadratic.
pub fn dense_energy(
    labels: &LabelMap,
    unary: &UnaryField,
    image: &ImageTensor,
    params: &CrfParams,
) -> Result<f64> {
    let params = validate_params(*params, unary.num_classes())?;
    if labels.height() != unary.height()
        || labels.width() != unary.width()
        || labels.num_classes() != unary.num_classes()
        || image.height() != unary.height()
        || image.width() != unary.width()
    {
        return Err(Error::ShapeMismatch(
            "labels, unary and image must share dimensions".into(),
        ));
    }
    let n = labels.pixel_count();
    if n > BRUTE_FORCE_PIXEL_LIMIT {
        return Err(Error::TooLarge(format!(
            "{n} pixels too large for exact energy (limit {BRUTE_FORCE_PIXEL_LIMIT})"
        )));
    }

    let mut energy = 0.0;
    for i in 0..n {
        energy += unary.pixel(i)[labels.label(i) as usize];
    }

    let bilateral = make_bilateral_features(image, params.theta_alpha, params.theta_beta)?;
    let spatial = make_spatial_features(image.height(), image.width(), params.theta_gamma)?;
    for i in 0..n {
        for j in i + 1..n {
            if labels.label(i) == labels.label(j) {
                continue;
            }
            energy += params.w_appearance * gaussian_weight(bilateral.pixel(i), bilateral.pixel(j))
                + params.w_smoothness * gaussian_weight(spatial.pixel(i), spatial.pixel(j));
        }
    }
    Ok(energy)
}

fn gaussian_weight(a: &[f64], b: &[f64]) -> f64 {
    let mut dist2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let t = x - y;
        dist2 += t * t;
    }
    (-0.5 * dist2).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unary::unary_from_labels;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn uniform_image(h: usize, w: usize, value: f64) -> ImageTensor {
        ImageTensor::new(h, w, 3, vec![value; h * w * 3]).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        ImageTensor::new(h, w, 3, data).unwrap()
    }

    fn random_labels(h: usize, w: usize, num_classes: usize, seed: u64) -> LabelMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..h * w)
            .map(|_| rng.random_range(0..num_classes as u32))
            .collect();
        LabelMap::new(h, w, num_classes, labels).unwrap()
    }

    fn small_params() -> CrfParams {
        CrfParams {
            theta_alpha: 4.0,
            theta_beta: 0.25,
            theta_gamma: 2.0,
            w_appearance: 2.0,
            w_smoothness: 1.0,
            ..CrfParams::default()
        }
    }

    #[test]
    fn init_marginals_inverts_label_unaries() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        for p in [0.7, 0.9] {
            let unary = unary_from_labels(&labels, p).unwrap();
            let q = init_marginals(&unary);
            assert_abs_diff_eq!(q.pixel(0)[0], p, epsilon = 1e-9);
            assert_abs_diff_eq!(q.pixel(0)[1], 1.0 - p, epsilon = 1e-9);
            assert_abs_diff_eq!(q.pixel(1)[1], p, epsilon = 1e-9);
        }
    }

    #[test]
    fn init_marginals_uniform_for_uniform_unary() {
        let unary = UnaryField::new(2, 2, 4, vec![1.3; 16]).unwrap();
        let q = init_marginals(&unary);
        for i in 0..4 {
            for l in 0..4 {
                assert_abs_diff_eq!(q.pixel(i)[l], 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn uniform_marginals_are_a_dense_fixed_point() {
        let h = 6;
        let w = 6;
        let image = random_image(h, w, 3);
        let unary = UnaryField::new(h, w, 3, vec![1.0; h * w * 3]).unwrap();
        let q = init_marginals(&unary);
        let next = dense_mean_field_step(&q, &unary, &image, &small_params()).unwrap();
        for (a, b) in q.values().iter().zip(next.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn uniform_marginals_are_a_grid_fixed_point() {
        let unary = UnaryField::new(4, 4, 2, vec![0.6931; 32]).unwrap();
        let q = init_marginals(&unary);
        let next = grid_mean_field_step(&q, &unary, &small_params()).unwrap();
        for (a, b) in q.values().iter().zip(next.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_weights_reset_to_unary_softmax() {
        let h = 4;
        let w = 4;
        let labels = random_labels(h, w, 2, 5);
        let unary = unary_from_labels(&labels, 0.8).unwrap();
        let image = random_image(h, w, 6);
        let params = CrfParams {
            w_appearance: 0.0,
            w_smoothness: 0.0,
            ..small_params()
        };
        // Start far from the unary softmax.
        let skewed = MarginalField::new(
            h,
            w,
            2,
            (0..h * w).flat_map(|_| [0.01, 0.99]).collect(),
        )
        .unwrap();
        let stepped = dense_mean_field_step(&skewed, &unary, &image, &params).unwrap();
        let init = init_marginals(&unary);
        for (a, b) in stepped.values().iter().zip(init.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Straight-line reference implementation of the dense update: explicit
    /// kernel sums per pixel pair, normalized responses, self term removed.
    fn reference_dense_step(
        q: &MarginalField,
        unary: &UnaryField,
        image: &ImageTensor,
        params: &CrfParams,
    ) -> MarginalField {
        let n = q.pixel_count();
        let num_classes = q.num_classes();
        let h = image.height();
        let w = image.width();

        let mut k_app = vec![0.0f64; n * n];
        let mut k_sm = vec![0.0f64; n * n];
        for i in 0..n {
            let (ri, ci) = (i / w, i % w);
            for j in 0..n {
                let (rj, cj) = (j / w, j % w);
                let dr = ri as f64 - rj as f64;
                let dc = ci as f64 - cj as f64;
                let spatial2 = dr * dr + dc * dc;
                let mut color2 = 0.0;
                for c in 0..image.channels() {
                    let t = image.pixel(i)[c] - image.pixel(j)[c];
                    color2 += t * t;
                }
                k_app[i * n + j] = (-spatial2 / (2.0 * params.theta_alpha * params.theta_alpha)
                    - color2 / (2.0 * params.theta_beta * params.theta_beta))
                    .exp();
                k_sm[i * n + j] =
                    (-spatial2 / (2.0 * params.theta_gamma * params.theta_gamma)).exp();
            }
        }

        let mut next = vec![0.0f64; n * num_classes];
        for i in 0..n {
            let norm_app: f64 = (0..n).map(|j| k_app[i * n + j]).sum();
            let norm_sm: f64 = (0..n).map(|j| k_sm[i * n + j]).sum();
            let mut exps = vec![0.0f64; num_classes];
            for l in 0..num_classes {
                let mut message = 0.0;
                for lp in 0..num_classes {
                    if lp == l {
                        continue;
                    }
                    let filt_app: f64 =
                        (0..n).map(|j| k_app[i * n + j] * q.pixel(j)[lp]).sum::<f64>() / norm_app;
                    let filt_sm: f64 =
                        (0..n).map(|j| k_sm[i * n + j] * q.pixel(j)[lp]).sum::<f64>() / norm_sm;
                    message += params.w_appearance * (filt_app - q.pixel(i)[lp])
                        + params.w_smoothness * (filt_sm - q.pixel(i)[lp]);
                }
                exps[l] = -(unary.pixel(i)[l] + message);
            }
            let max = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = exps.iter().map(|e| (e - max).exp()).sum();
            for l in 0..num_classes {
                next[i * num_classes + l] = (exps[l] - max).exp() / z;
            }
        }
        MarginalField::new(h, w, num_classes, next).unwrap()
    }

    #[test]
    fn dense_step_matches_straight_line_reference() {
        let h = 8;
        let w = 8;
        // One flipped label in an otherwise constant map.
        let mut labels = vec![0u32; h * w];
        labels[27] = 1;
        let labels = LabelMap::new(h, w, 2, labels).unwrap();
        let unary = unary_from_labels(&labels, 0.9).unwrap();
        let image = random_image(h, w, 7);
        let params = small_params();

        let q = init_marginals(&unary);
        let ours =
            dense_mean_field_step_with(&q, &unary, &image, &params, FilterBackend::BruteForce)
                .unwrap();
        let reference = reference_dense_step(&q, &unary, &image, &params);
        for (a, b) in ours.values().iter().zip(reference.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn grid_message_closed_form_interior_pixel() {
        // 3x3, center pixel; all four neighbors hold Q = (1, 0).
        let mut q = vec![0.0f64; 9 * 2];
        for i in 0..9 {
            q[i * 2] = 1.0;
        }
        // Center gets (0, 1) so the map is not constant.
        q[4 * 2] = 0.0;
        q[4 * 2 + 1] = 1.0;
        let q = MarginalField::new(3, 3, 2, q).unwrap();
        let w_grid = 1.7;
        let msg = grid_messages(&q, w_grid);
        assert_abs_diff_eq!(msg[4 * 2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(msg[4 * 2 + 1], 4.0 * w_grid, epsilon = 1e-12);
    }

    #[test]
    fn grid_zero_weight_resets_to_unary_softmax() {
        let labels = random_labels(3, 5, 3, 8);
        let unary = unary_from_labels(&labels, 0.7).unwrap();
        let params = CrfParams { w_grid: 0.0, ..CrfParams::default() };
        let skewed = MarginalField::new(
            3,
            5,
            3,
            (0..15).flat_map(|_| [0.98, 0.01, 0.01]).collect(),
        )
        .unwrap();
        let stepped = grid_mean_field_step(&skewed, &unary, &params).unwrap();
        let init = init_marginals(&unary);
        for (a, b) in stepped.values().iter().zip(init.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    /// Hand-loop oracle for one grid sweep on a tiny instance.
    fn reference_grid_step(
        q: &MarginalField,
        unary: &UnaryField,
        w_grid: f64,
    ) -> Vec<f64> {
        let (h, w, num_classes) = (q.height(), q.width(), q.num_classes());
        let mut out = vec![0.0f64; h * w * num_classes];
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let mut scores = vec![0.0f64; num_classes];
                for l in 0..num_classes {
                    let mut message = 0.0;
                    let mut add = |rr: i64, cc: i64| {
                        if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                            let j = rr as usize * w + cc as usize;
                            // Potts: sum over l' != l of Q_j(l').
                            let mut s = 0.0;
                            for lp in 0..num_classes {
                                if lp != l {
                                    s += q.pixel(j)[lp];
                                }
                            }
                            message += w_grid * s;
                        }
                    };
                    add(r as i64 - 1, c as i64);
                    add(r as i64 + 1, c as i64);
                    add(r as i64, c as i64 - 1);
                    add(r as i64, c as i64 + 1);
                    scores[l] = -(unary.pixel(i)[l] + message);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for l in 0..num_classes {
                    out[i * num_classes + l] = (scores[l] - max).exp() / z;
                }
            }
        }
        out
    }

    #[test]
    fn grid_step_matches_hand_loop_oracle() {
        let labels = random_labels(3, 3, 2, 9);
        let unary = unary_from_labels(&labels, 0.75).unwrap();
        let params = CrfParams { w_grid: 1.3, ..CrfParams::default() };
        let q = init_marginals(&unary);
        let ours = grid_mean_field_step(&q, &unary, &params).unwrap();
        let reference = reference_grid_step(&q, &unary, params.w_grid);
        for (a, b) in ours.values().iter().zip(&reference) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_iterations_return_input_labels() {
        let labels = random_labels(5, 5, 3, 10);
        let unary = unary_from_labels(&labels, 0.8).unwrap();
        let image = random_image(5, 5, 11);
        let params = CrfParams { iterations: 0, ..small_params() };
        let (_, map, trace) = run_inference(&unary, &image, &params).unwrap();
        assert_eq!(map.labels(), labels.labels());
        assert_eq!(trace.iterations_run, 0);
        assert!(trace.per_iteration_max_delta.is_empty());
    }

    #[test]
    fn inference_is_deterministic_across_runs() {
        let labels = random_labels(12, 12, 2, 13);
        let unary = unary_from_labels(&labels, 0.9).unwrap();
        let image = random_image(12, 12, 14);
        let params = small_params();
        let (q1, m1, t1) = run_inference(&unary, &image, &params).unwrap();
        let (q2, m2, t2) = run_inference(&unary, &image, &params).unwrap();
        assert_eq!(q1.values(), q2.values(), "marginals must be bitwise equal");
        assert_eq!(m1.labels(), m2.labels());
        assert_eq!(t1.per_iteration_max_delta, t2.per_iteration_max_delta);
    }

    #[test]
    fn zero_pairwise_returns_unary_argmax_for_any_iterations() {
        let labels = random_labels(6, 6, 4, 15);
        let unary = unary_from_labels(&labels, 0.6).unwrap();
        let image = random_image(6, 6, 16);
        for iterations in [1, 3, 7] {
            let params = CrfParams {
                w_appearance: 0.0,
                w_smoothness: 0.0,
                iterations,
                ..small_params()
            };
            let (_, map, _) = run_inference(&unary, &image, &params).unwrap();
            assert_eq!(map.labels(), labels.labels());
        }
    }

    #[test]
    fn label_permutation_equivariance() {
        let h = 6;
        let w = 6;
        let labels = random_labels(h, w, 3, 17);
        let image = random_image(h, w, 18);
        let params = CrfParams { iterations: 3, ..small_params() };

        let unary = unary_from_labels(&labels, 0.8).unwrap();
        let (_, base, _) = run_inference(&unary, &image, &params).unwrap();

        // Cyclic relabeling l -> (l + 1) mod 3 of the input.
        let perm = |l: u32| (l + 1) % 3;
        let permuted_labels: Vec<u32> = labels.labels().iter().map(|&l| perm(l)).collect();
        let permuted = LabelMap::new(h, w, 3, permuted_labels).unwrap();
        let unary_p = unary_from_labels(&permuted, 0.8).unwrap();
        let (_, out_p, _) = run_inference(&unary_p, &image, &params).unwrap();

        for (a, b) in base.labels().iter().zip(out_p.labels()) {
            assert_eq!(perm(*a), *b);
        }
    }

    #[test]
    fn near_certain_confidence_freezes_labels() {
        let labels = random_labels(8, 8, 2, 19);
        let unary = unary_from_labels(&labels, 1.0 - 1e-6).unwrap();
        let image = random_image(8, 8, 20);
        let params = CrfParams::default();
        let (_, map, _) = run_inference(&unary, &image, &params).unwrap();
        assert_eq!(map.labels(), labels.labels());
    }

    #[test]
    fn marginals_stay_normalized_across_sweeps() {
        let labels = random_labels(10, 10, 3, 23);
        let unary = unary_from_labels(&labels, 0.85).unwrap();
        let image = random_image(10, 10, 24);
        let params = CrfParams { iterations: 10, ..small_params() };
        let (q, _, trace) = run_inference(&unary, &image, &params).unwrap();
        assert_eq!(trace.iterations_run, 10);
        for i in 0..q.pixel_count() {
            let sum: f64 = q.pixel(i).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(q.pixel(i).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(trace.per_iteration_max_delta.iter().all(|d| *d >= 0.0));
    }

    #[test]
    fn early_exit_stops_before_iteration_budget() {
        let labels = random_labels(6, 6, 2, 25);
        let unary = unary_from_labels(&labels, 0.9).unwrap();
        let image = uniform_image(6, 6, 0.5);
        let params = CrfParams { iterations: 50, ..small_params() };
        let options = InferenceOptions {
            early_exit_delta: Some(1e-5),
            ..InferenceOptions::default()
        };
        let (_, _, trace) = run_inference_with(&unary, &image, &params, &options).unwrap();
        assert!(trace.iterations_run < 50, "ran {} sweeps", trace.iterations_run);
        assert_eq!(trace.per_iteration_max_delta.len(), trace.iterations_run);
    }

    #[test]
    fn damped_run_matches_fixed_points_of_undamped() {
        // With uniform unary, uniform Q is a fixed point for any damping.
        let unary = UnaryField::new(4, 4, 2, vec![std::f64::consts::LN_2; 32]).unwrap();
        let image = uniform_image(4, 4, 0.3);
        let params = CrfParams { iterations: 4, ..small_params() };
        let options = InferenceOptions { damping: 0.5, ..InferenceOptions::default() };
        let (q, _, _) = run_inference_with(&unary, &image, &params, &options).unwrap();
        for i in 0..q.pixel_count() {
            assert_abs_diff_eq!(q.pixel(i)[0], 0.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn dense_energy_single_pixel_is_unary_cost() {
        let labels = LabelMap::new(1, 1, 2, vec![1]).unwrap();
        let unary = UnaryField::new(1, 1, 2, vec![0.3, 0.9]).unwrap();
        let image = uniform_image(1, 1, 0.5);
        let e = dense_energy(&labels, &unary, &image, &small_params()).unwrap();
        assert_abs_diff_eq!(e, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn dense_energy_equal_labels_have_no_pairwise_term() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 0]).unwrap();
        let unary = UnaryField::new(1, 2, 2, vec![0.1, 2.0, 0.4, 2.0]).unwrap();
        let image = uniform_image(1, 2, 0.5);
        let e = dense_energy(&labels, &unary, &image, &small_params()).unwrap();
        assert_abs_diff_eq!(e, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn dense_energy_matches_double_loop_oracle() {
        let h = 3;
        let w = 3;
        let labels = random_labels(h, w, 2, 26);
        let unary = unary_from_labels(&labels, 0.7).unwrap();
        let image = random_image(h, w, 27);
        let params = small_params();
        let e = dense_energy(&labels, &unary, &image, &params).unwrap();

        // Independent evaluation with explicit coordinates.
        let mut expected = 0.0;
        for i in 0..9 {
            expected += unary.pixel(i)[labels.label(i) as usize];
        }
        for i in 0..9 {
            for j in (i + 1)..9 {
                if labels.label(i) == labels.label(j) {
                    continue;
                }
                let (ri, ci) = ((i / w) as f64, (i % w) as f64);
                let (rj, cj) = ((j / w) as f64, (j % w) as f64);
                let sp = (ri - rj).powi(2) + (ci - cj).powi(2);
                let mut col = 0.0;
                for ch in 0..3 {
                    col += (image.pixel(i)[ch] - image.pixel(j)[ch]).powi(2);
                }
                let k1 = (-sp / (2.0 * params.theta_alpha.powi(2))
                    - col / (2.0 * params.theta_beta.powi(2)))
                    .exp();
                let k2 = (-sp / (2.0 * params.theta_gamma.powi(2))).exp();
                expected += params.w_appearance * k1 + params.w_smoothness * k2;
            }
        }
        assert_abs_diff_eq!(e, expected, epsilon = 1e-9);
    }

    #[test]
    fn dense_energy_rejects_oversized_inputs() {
        let side = 70; // 4900 > 4096
        let labels = LabelMap::new(side, side, 2, vec![0; side * side]).unwrap();
        let unary = UnaryField::new(side, side, 2, vec![0.5; side * side * 2]).unwrap();
        let image = uniform_image(side, side, 0.5);
        let err = dense_energy(&labels, &unary, &image, &small_params()).unwrap_err();
        assert!(matches!(err, Error::TooLarge(_)));
        assert!(err.to_string().contains("too large for exact"));
    }

    #[test]
    fn brute_force_backend_rejects_oversized_inputs() {
        let side = 70;
        let labels = LabelMap::new(side, side, 2, vec![0; side * side]).unwrap();
        let unary = unary_from_labels(&labels, 0.9).unwrap();
        let image = uniform_image(side, side, 0.5);
        let options = InferenceOptions {
            backend: FilterBackend::BruteForce,
            ..InferenceOptions::default()
        };
        let err = run_inference_with(&unary, &image, &CrfParams::default(), &options).unwrap_err();
        assert!(matches!(err, Error::TooLarge(_)));
    }

    #[test]
    fn fast_and_brute_backends_agree_after_five_sweeps() {
        let h = 16;
        let w = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        // Two half-plane regions with a handful of flips.
        let clean: Vec<u32> = (0..h * w).map(|i| (i / w >= h / 2) as u32).collect();
        let mut noisy = clean.clone();
        for _ in 0..20 {
            let i = rng.random_range(0..h * w);
            noisy[i] = 1 - noisy[i];
        }
        let labels = LabelMap::new(h, w, 2, noisy).unwrap();
        let unary = unary_from_labels(&labels, 0.9).unwrap();
        let image = random_image(h, w, 29);
        let params = CrfParams { iterations: 5, ..small_params() };

        let fast = run_inference(&unary, &image, &params).unwrap();
        let brute = run_inference_with(
            &unary,
            &image,
            &params,
            &InferenceOptions { backend: FilterBackend::BruteForce, ..Default::default() },
        )
        .unwrap();

        let n = h * w;
        let disagreements = fast
            .1
            .labels()
            .iter()
            .zip(brute.1.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert!(
            disagreements as f64 <= 0.01 * n as f64,
            "{disagreements} label disagreements on {n} pixels"
        );
        for (a, b) in fast.0.values().iter().zip(brute.0.values()) {
            assert!((a - b).abs() <= 0.05, "marginal gap {}", (a - b).abs());
        }
    }
}
