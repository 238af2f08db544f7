//! Shared domain types: rasters, fields, palettes, and CRF parameters.
//!
//! All types are validated on construction and immutable afterwards, so they
//! can be shared freely between threads. Rasters are stored row-major; a
//! pixel's flat index is `row * width + col`. Per-pixel vectors (channels,
//! class costs, class marginals) are interleaved: entry `k` of pixel `i`
//! lives at `i * k_len + k`.

use crate::error::{Error, Result};

/// H x W x C raster of channel intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds a tensor, validating shape, channel count (1, 3 or 4) and value range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::InvalidInput(format!(
                "unsupported channel count {channels} (expected 1, 3 or 4)"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} != {height} * {width} * {channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidInput(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Channel values of pixel `i` (flat row-major index).
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// H x W raster of class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "label map dimensions must be positive, got {height}x{width}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label data length {} != {height} * {width}",
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { height, width, num_classes, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }
}

/// Ordered class-name / RGB-color table used to encode and decode label rasters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    entries: Vec<(String, [u8; 3])>,
}

impl ClassPalette {
    /// Builds a palette; entries must be non-empty and colors pairwise distinct.
    pub fn new(entries: Vec<(String, [u8; 3])>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("palette has no entries".into()));
        }
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                if entries[i].1 == entries[j].1 {
                    let [r, g, b] = entries[i].1;
                    return Err(Error::InvalidInput(format!(
                        "palette colors must be distinct; ({r},{g},{b}) appears for both '{}' and '{}'",
                        entries[i].0, entries[j].0
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(String, [u8; 3])] {
        &self.entries
    }

    pub fn color(&self, class: usize) -> [u8; 3] {
        self.entries[class].1
    }

    pub fn name(&self, class: usize) -> &str {
        &self.entries[class].0
    }

    /// Index of the entry named `name`, if any.
    pub fn class_of_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }
}

/// Returns one of the two builtin palettes.
///
/// `city_binary` is the two-class urban/rural coding; `potsdam` the six-class
/// aerial coding (clutter, car, low_vegetation, building, tree, impervious).
pub fn builtin_palette(name: &str) -> Result<ClassPalette> {
    let entries: Vec<(&str, [u8; 3])> = match name {
        "city_binary" => vec![("urban", [255, 255, 0]), ("rural", [0, 0, 255])],
        "potsdam" => vec![
            ("clutter", [255, 0, 0]),
            ("car", [255, 255, 0]),
            ("low_vegetation", [0, 255, 255]),
            ("building", [0, 0, 255]),
            ("tree", [0, 255, 0]),
            ("impervious", [255, 255, 255]),
        ],
        _ => return Err(Error::UnknownPalette { name: name.to_string() }),
    };
    ClassPalette::new(entries.into_iter().map(|(n, c)| (n.to_string(), c)).collect())
}

/// H x W x L field of per-class negative log-probabilities (all finite, >= 0).
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    height: usize,
    width: usize,
    num_classes: usize,
    costs: Vec<f64>,
}

impl UnaryField {
    pub fn new(height: usize, width: usize, num_classes: usize, costs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "unary field shape {height}x{width}x{num_classes} invalid"
            )));
        }
        if costs.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "unary cost length {} != {height} * {width} * {num_classes}",
                costs.len()
            )));
        }
        if let Some(c) = costs.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::InvalidInput(format!(
                "unary cost {c} must be finite and >= 0"
            )));
        }
        Ok(Self { height, width, num_classes, costs })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// Class costs of pixel `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.costs[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Per-pixel class sums may drift from 1 by at most this much.
pub const MARGINAL_SUM_TOLERANCE: f64 = 1e-6;

/// H x W x L field of per-pixel class marginals; each pixel sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    height: usize,
    width: usize,
    num_classes: usize,
    q: Vec<f64>,
}

impl MarginalField {
    /// Builds a field, checking range and the per-pixel sum-to-1 invariant.
    pub fn new(height: usize, width: usize, num_classes: usize, q: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "marginal field shape {height}x{width}x{num_classes} invalid"
            )));
        }
        if q.len() != height * width * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "marginal data length {} != {height} * {width} * {num_classes}",
                q.len()
            )));
        }
        for (i, px) in q.chunks_exact(num_classes).enumerate() {
            let mut sum = 0.0;
            for &v in px {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!(
                        "marginal {v} at pixel {i} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > MARGINAL_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "marginals at pixel {i} sum to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { height, width, num_classes, q })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    /// Class marginals of pixel `i`.
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.q[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Per-pixel argmax with ties broken toward the lowest class index.
    pub fn map_labels(&self) -> LabelMap {
        let labels = self
            .q
            .chunks_exact(self.num_classes)
            .map(|px| {
                let mut best = 0usize;
                for (l, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = l;
                    }
                }
                best as u32
            })
            .collect();
        // Shape already validated on construction.
        LabelMap::new(self.height, self.width, self.num_classes, labels)
            .expect("marginal field shape is valid")
    }
}

/// Model family selector: fully-connected pairwise terms or the 4-neighbor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Dense,
    Grid,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Dense => write!(f, "dense"),
            ModelKind::Grid => write!(f, "grid"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ModelKind::Dense),
            "grid" => Ok(ModelKind::Grid),
            _ => Err(Error::InvalidParameter(format!(
                "unknown model kind '{s}' (expected 'dense' or 'grid')"
            ))),
        }
    }
}

/// All tunable knobs of a refinement run.
///
/// `p_label_confidence` is the probability assigned to each observed label
/// when building unaries; it must lie strictly inside `(1/L, 1)`. Kernel
/// widths are in pixels (`theta_alpha`, `theta_gamma`) and intensity units
/// on the `[0, 1]` scale (`theta_beta`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    pub p_label_confidence: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub w_appearance: f64,
    pub w_smoothness: f64,
    pub iterations: usize,
    pub model_kind: ModelKind,
    /// Potts weight of the grid model; ignored when `model_kind` is `Dense`.
    pub w_grid: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            p_label_confidence: 0.95,
            theta_alpha: 80.0,
            theta_beta: 0.05,
            theta_gamma: 3.0,
            w_appearance: 10.0,
            w_smoothness: 3.0,
            iterations: 5,
            model_kind: ModelKind::Dense,
            w_grid: 2.0,
        }
    }
}

/// Checks every `CrfParams` invariant against a concrete class count and
/// returns the value unchanged. Validating an already-checked value is a
/// no-op, so the function is idempotent.
pub fn validate_params(params: CrfParams, num_classes: usize) -> Result<CrfParams> {
    if num_classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    let p = params.p_label_confidence;
    if !p.is_finite() || p <= 1.0 / num_classes as f64 || p >= 1.0 {
        return Err(Error::ConfidenceOutOfRange { p, num_classes });
    }
    for (name, value) in [
        ("theta_alpha", params.theta_alpha),
        ("theta_beta", params.theta_beta),
        ("theta_gamma", params.theta_gamma),
    ] {
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::InvalidKernelWidth { name, value });
        }
    }
    for (name, value) in [
        ("w_appearance", params.w_appearance),
        ("w_smoothness", params.w_smoothness),
        ("w_grid", params.w_grid),
    ] {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "{name} = {value} must be finite and >= 0"
            )));
        }
    }
    Ok(params)
}
