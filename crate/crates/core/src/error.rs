//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Label confidence outside the open interval (1/L, 1).
    #[error("confidence out of range: p = {p} must lie strictly inside (1/{num_classes}, 1)")]
    ConfidenceOutOfRange { p: f64, num_classes: usize },

    /// A kernel width that must be strictly positive is not.
    #[error("invalid kernel width: {name} = {value} (must be > 0)")]
    InvalidKernelWidth { name: &'static str, value: f64 },

    /// Any other parameter that fails validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Inputs whose dimensions disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Data that violates a type invariant (non-finite, out of range, unnormalized).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Palette name that is not a builtin.
    #[error("unknown palette '{name}'; valid builtin names: city_binary, potsdam")]
    UnknownPalette { name: String },

    /// Label raster colors that match no palette entry within tolerance.
    #[error("{total} pixel(s) with colors matching no palette entry within tolerance {tolerance}: {}",
            format_color_counts(.colors))]
    UnmatchedColors {
        colors: Vec<([u8; 3], u64)>,
        total: u64,
        tolerance: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format for {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("corrupt image data in {path}: {detail}")]
    CorruptData { path: PathBuf, detail: String },

    /// Non-finite intermediate or a degenerate normalizer.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Input exceeds a hard size guard for an exact O(N^2) computation.
    #[error("too large for exact computation: {0}")]
    TooLarge(String),
}

fn format_color_counts(colors: &[([u8; 3], u64)]) -> String {
    const SHOWN: usize = 8;
    let mut parts: Vec<String> = colors
        .iter()
        .take(SHOWN)
        .map(|([r, g, b], n)| format!("({r},{g},{b}) x{n}"))
        .collect();
    if colors.len() > SHOWN {
        parts.push(format!("... and {} more", colors.len() - SHOWN));
    }
    parts.join(", ")
}
