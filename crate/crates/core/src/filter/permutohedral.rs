//! Approximate Gaussian filtering on the permutohedral lattice.
//!
//! The lattice embeds d-dimensional feature points into the hyperplane
//! `H_d = { x in R^(d+1) : sum(x) = 0 }`, splats each value onto the d+1
//! vertices of its enclosing simplex with barycentric weights, runs several
//! passes of a `[1, 2, 1] / 4` blur along each of the d+1 lattice
//! directions, and slices the result back at the original points. The
//! composition approximates convolution with the unit Gaussian
//! `exp(-||f_i - f_j||^2 / 2)` in feature space at `O(N * d^2)` cost
//! instead of `O(N^2)`.
//!
//! Accuracy is controlled by [`BLUR_PASSES`]: each extra pass makes the
//! lattice finer relative to the kernel width (the elevation scale grows as
//! `sqrt((3n + 1) / 6) * (d + 1)` to keep the composite variance at one
//! feature unit), so the piecewise-polynomial composite kernel converges to
//! the Gaussian and the splat/slice interpolation error shrinks. A single
//! pass reproduces the classic lattice, which is accurate only up to a
//! position-dependent gain; the multi-pass variant also matches the
//! Gaussian in absolute scale once the output is multiplied by the
//! closed-form density correction `(pi * (3n + 1) / 3)^(d/2) * sqrt(d + 1)`
//! (the ratio of the composite kernel's lattice mass to the Gaussian
//! integral, using the lattice covolume `(d + 1)^(d - 1/2)`).
//!
//! The lattice depends only on the feature field, so one instance can
//! filter any number of value channels; channels are processed
//! independently (and in parallel) with identical per-channel arithmetic,
//! which keeps results bitwise reproducible across thread counts.

use rayon::prelude::*;

use crate::filter::FeatureField;

/// Blur passes per lattice direction. Three passes keep the absolute error
/// of the all-ones response within a few percent up to d = 5 while staying
/// well inside the desk-scale time budget.
pub const BLUR_PASSES: usize = 3;

/// Rings of axis-neighbor vertices added around the splatted set so that
/// multi-pass blur mass can travel between data vertices through lattice
/// points no data point touches. One ring covers every length-3 path
/// between data vertices; farther detours carry negligible weight.
pub const HALO_RINGS: usize = 1;

/// Open-addressing map from lattice keys (first `dim` coordinates of a
/// lattice point) to dense vertex indices, with keys stored in one arena.
struct KeyTable {
    dim: usize,
    mask: usize,
    /// Slot -> vertex index + 1; 0 marks an empty slot.
    slots: Vec<u32>,
    keys: Vec<i32>,
}

impl KeyTable {
    fn with_capacity(dim: usize, expected: usize) -> Self {
        let capacity = (expected.max(8) * 2).next_power_of_two();
        Self {
            dim,
            mask: capacity - 1,
            slots: vec![0; capacity],
            keys: Vec::with_capacity(expected * dim),
        }
    }

    fn len(&self) -> usize {
        self.keys.len() / self.dim.max(1)
    }

    fn key(&self, vertex: usize) -> &[i32] {
        &self.keys[vertex * self.dim..(vertex + 1) * self.dim]
    }

    fn hash(key: &[i32]) -> u64 {
        // FNV-1a over the raw coordinate words; fixed constants keep the
        // table layout deterministic across runs and platforms.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &k in key {
            h ^= k as u32 as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn find_or_insert(&mut self, key: &[i32]) -> u32 {
        if (self.len() + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let mut slot = Self::hash(key) as usize & self.mask;
        loop {
            match self.slots[slot] {
                0 => {
                    let index = self.len() as u32;
                    self.keys.extend_from_slice(key);
                    self.slots[slot] = index + 1;
                    return index;
                }
                stored => {
                    let index = stored - 1;
                    if self.key(index as usize) == key {
                        return index;
                    }
                    slot = (slot + 1) & self.mask;
                }
            }
        }
    }

    fn grow(&mut self) {
        let capacity = self.slots.len() * 2;
        self.mask = capacity - 1;
        self.slots = vec![0; capacity];
        for index in 0..self.len() as u32 {
            let mut slot = Self::hash(self.key(index as usize)) as usize & self.mask;
            while self.slots[slot] != 0 {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = index + 1;
        }
    }

    fn find(&self, key: &[i32]) -> Option<u32> {
        let mut slot = Self::hash(key) as usize & self.mask;
        loop {
            match self.slots[slot] {
                0 => return None,
                stored => {
                    let index = stored - 1;
                    if self.key(index as usize) == key {
                        return Some(index);
                    }
                    slot = (slot + 1) & self.mask;
                }
            }
        }
    }
}

/// Precomputed splat/blur/slice plan for one feature field.
pub struct PermutohedralLattice {
    pixel_count: usize,
    dim: usize,
    passes: usize,
    vertex_count: usize,
    /// Per pixel, per simplex remainder: dense vertex index.
    offsets: Vec<u32>,
    /// Per pixel, per simplex remainder: barycentric weight.
    barycentric: Vec<f64>,
    /// Per blur axis, per vertex: the two neighbor indices
    /// (`vertex_count` acts as the always-zero sentinel slot).
    blur_neighbors: Vec<[u32; 2]>,
}

impl PermutohedralLattice {
    /// Builds the lattice with the default accuracy configuration:
    /// [`BLUR_PASSES`] passes and [`HALO_RINGS`] halo rings.
    pub fn new(features: &FeatureField) -> Self {
        Self::with_config(features, BLUR_PASSES, HALO_RINGS)
    }

    /// Builds the lattice with an explicit accuracy configuration.
    pub fn with_config(features: &FeatureField, passes: usize, halo_rings: usize) -> Self {
        let d = features.dim();
        let n = features.pixel_count();
        let dp1 = d + 1;

        // Diagonal scaling of the elevation basis; the leading factor sets
        // the composite blur's standard deviation (n passes of variance
        // (d+1)^2/2 plus two interpolation hats of (d+1)^2/12 each) to one
        // feature unit.
        let inv_std_dev = dp1 as f64 * ((3 * passes + 1) as f64 / 6.0).sqrt();
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std_dev / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let mut table = KeyTable::with_capacity(d, n * dp1);
        let mut offsets = vec![0u32; n * dp1];
        let mut barycentric = vec![0.0f64; n * dp1];

        let mut elevated = vec![0.0f64; dp1];
        let mut rem0 = vec![0i32; dp1];
        let mut rank = vec![0i32; dp1];
        let mut bary = vec![0.0f64; dp1 + 1];
        let mut key = vec![0i32; d];

        for pix in 0..n {
            let f = features.pixel(pix);

            // Elevate into the zero-sum hyperplane.
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // Round to the nearest remainder-0 lattice point.
            let mut sum = 0i32;
            for i in 0..dp1 {
                let v = elevated[i] / dp1 as f64;
                let up = v.ceil() * dp1 as f64;
                let down = v.floor() * dp1 as f64;
                let rd = if up - elevated[i] < elevated[i] - down { up } else { down };
                rem0[i] = rd as i32;
                sum += rem0[i] / dp1 as i32;
            }

            // Rank each coordinate by its differential.
            rank.fill(0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..dp1 {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }

            // If the rounded point is off the hyperplane, walk it back.
            for i in 0..dp1 {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += dp1 as i32;
                    rem0[i] += dp1 as i32;
                } else if rank[i] > d as i32 {
                    rank[i] -= dp1 as i32;
                    rem0[i] -= dp1 as i32;
                }
            }

            // Barycentric coordinates inside the simplex.
            bary.fill(0.0);
            for i in 0..dp1 {
                let v = (elevated[i] - rem0[i] as f64) / dp1 as f64;
                bary[(d as i32 - rank[i]) as usize] += v;
                bary[(d as i32 - rank[i] + 1) as usize] -= v;
            }
            bary[0] += 1.0 + bary[dp1];

            // Register the d+1 simplex vertices.
            for rem in 0..dp1 {
                for i in 0..d {
                    let mut k = rem0[i] + rem as i32;
                    if rank[i] > (d - rem) as i32 {
                        k -= dp1 as i32;
                    }
                    key[i] = k;
                }
                offsets[pix * dp1 + rem] = table.find_or_insert(&key);
                barycentric[pix * dp1 + rem] = bary[rem];
            }
        }

        // Grow halo rings of axis neighbors around the splatted vertices so
        // blur mass can flow through lattice points no pixel touches.
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        let mut ring_start = 0usize;
        let mut key_buf = vec![0i32; d];
        for _ in 0..halo_rings {
            let ring_end = table.len();
            for v in ring_start..ring_end {
                key_buf.copy_from_slice(table.key(v));
                for axis in 0..dp1 {
                    for i in 0..d {
                        n1[i] = key_buf[i] - 1;
                        n2[i] = key_buf[i] + 1;
                    }
                    if axis < d {
                        n1[axis] = key_buf[axis] + d as i32;
                        n2[axis] = key_buf[axis] - d as i32;
                    }
                    table.find_or_insert(&n1);
                    table.find_or_insert(&n2);
                }
            }
            ring_start = ring_end;
        }

        let m = table.len();
        let sentinel = m as u32;
        let mut blur_neighbors = vec![[sentinel, sentinel]; dp1 * m];
        for axis in 0..dp1 {
            for v in 0..m {
                let key = table.key(v);
                for i in 0..d {
                    n1[i] = key[i] - 1;
                    n2[i] = key[i] + 1;
                }
                if axis < d {
                    n1[axis] = key[axis] + d as i32;
                    n2[axis] = key[axis] - d as i32;
                }
                blur_neighbors[axis * m + v] = [
                    table.find(&n1).unwrap_or(sentinel),
                    table.find(&n2).unwrap_or(sentinel),
                ];
            }
        }

        Self {
            pixel_count: n,
            dim: d,
            passes,
            vertex_count: m,
            offsets,
            barycentric,
            blur_neighbors,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    /// Number of occupied lattice vertices.
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    /// Filters one scalar channel (`values.len()` must equal the pixel count).
    pub fn filter_channel(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.pixel_count, "channel length mismatch");
        let dp1 = self.dim + 1;
        let m = self.vertex_count;

        // Splat. The extra slot `m` stays zero and absorbs reads from
        // missing blur neighbors.
        let mut lattice = vec![0.0f64; m + 1];
        for pix in 0..self.pixel_count {
            let v = values[pix];
            for rem in 0..dp1 {
                let o = self.offsets[pix * dp1 + rem] as usize;
                lattice[o] += self.barycentric[pix * dp1 + rem] * v;
            }
        }

        // Blur along each lattice direction, several passes.
        let mut buf = vec![0.0f64; m + 1];
        for _ in 0..self.passes {
            for axis in 0..dp1 {
                let neighbors = &self.blur_neighbors[axis * m..(axis + 1) * m];
                for v in 0..m {
                    let [a, b] = neighbors[v];
                    buf[v] =
                        0.5 * lattice[v] + 0.25 * (lattice[a as usize] + lattice[b as usize]);
                }
                std::mem::swap(&mut lattice, &mut buf);
            }
        }

        // Slice, restoring absolute Gaussian scale: the normalized blur
        // leaves each splat with unit lattice mass spread over covolume
        // (d+1)^(d-1/2) cells, while the target Gaussian integrates to
        // (2 pi sigma^2)^(d/2) with sigma^2 = (3n+1)/6 * (d+1)^2.
        let n_passes = self.passes as f64;
        let dim = self.dim as f64;
        let gain = (std::f64::consts::PI * (3.0 * n_passes + 1.0) / 3.0).powf(dim / 2.0)
            * (dim + 1.0).sqrt();
        let mut out = vec![0.0f64; self.pixel_count];
        for pix in 0..self.pixel_count {
            let mut acc = 0.0;
            for rem in 0..dp1 {
                let o = self.offsets[pix * dp1 + rem] as usize;
                acc += self.barycentric[pix * dp1 + rem] * lattice[o];
            }
            out[pix] = acc * gain;
        }
        out
    }

    /// Filters `channels` interleaved value channels; channels run in
    /// parallel and each is computed exactly as in [`Self::filter_channel`].
    pub fn filter_interleaved(&self, values: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(
            values.len(),
            self.pixel_count * channels,
            "value length mismatch"
        );
        if channels == 1 {
            return self.filter_channel(values);
        }
        let filtered: Vec<Vec<f64>> = (0..channels)
            .into_par_iter()
            .map(|c| {
                let channel: Vec<f64> =
                    (0..self.pixel_count).map(|i| values[i * channels + c]).collect();
                self.filter_channel(&channel)
            })
            .collect();
        let mut out = vec![0.0f64; values.len()];
        for (c, chan) in filtered.iter().enumerate() {
            for i in 0..self.pixel_count {
                out[i * channels + c] = chan[i];
            }
        }
        out
    }
}
