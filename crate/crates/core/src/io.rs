//! PNG raster I/O, palette text files, and metric serialization.
//!
//! PNG is the only raster codec: 8- or 16-bit gray/RGB/RGBA in, 8-bit RGB
//! out. Label rasters are color-coded through a [`ClassPalette`]; decoding
//! matches colors exactly first and falls back to the nearest palette color
//! within a Euclidean RGB tolerance to absorb antialiased edges.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, SweepSummary};
use crate::model::{ClassPalette, ImageTensor, LabelMap};

/// Default maximum Euclidean RGB distance when snapping off-palette colors
/// (out of a possible ~441.7 for the full black-white diagonal).
pub const DEFAULT_COLOR_TOLERANCE: f64 = 10.0;

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn decode_png(path: &Path) -> Result<DynamicImage> {
    let bytes = read_file(path)?;
    if bytes.len() < PNG_MAGIC.len() || bytes[..PNG_MAGIC.len()] != PNG_MAGIC {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: "not a PNG file (bad signature)".into(),
        });
    }
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::CorruptData {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Loads an 8- or 16-bit gray/RGB/RGBA PNG with intensities normalized to
/// `[0, 1]` (8-bit values divide by 255, 16-bit by 65535).
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let decoded = decode_png(path)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match decoded {
        DynamicImage::ImageLuma8(buf) => {
            (1, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(buf) => {
            (3, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageRgba8(buf) => {
            (4, buf.into_raw().iter().map(|&v| v as f64 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(buf) => {
            (1, buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(buf) => {
            (3, buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        DynamicImage::ImageRgba16(buf) => {
            (4, buf.into_raw().iter().map(|&v| v as f64 / 65535.0).collect())
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                detail: format!(
                    "pixel layout {:?} not supported (expected gray, RGB or RGBA)",
                    other.color()
                ),
            })
        }
    };
    ImageTensor::new(h, w, channels, data)
}

/// Loads a color-coded label raster using [`DEFAULT_COLOR_TOLERANCE`].
pub fn load_labels(path: &Path, palette: &ClassPalette) -> Result<LabelMap> {
    load_labels_with_tolerance(path, palette, DEFAULT_COLOR_TOLERANCE)
}

/// Loads a color-coded label raster.
///
/// Off-palette colors snap to the nearest palette entry when within
/// `tolerance`; anything farther fails with a list of the offending colors
/// and their pixel counts.
pub fn load_labels_with_tolerance(
    path: &Path,
    palette: &ClassPalette,
    tolerance: f64,
) -> Result<LabelMap> {
    let decoded = decode_png(path)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let rgb = decoded.into_rgb8();

    let exact: BTreeMap<[u8; 3], u32> = palette
        .entries()
        .iter()
        .enumerate()
        .map(|(i, (_, color))| (*color, i as u32))
        .collect();

    let mut labels = Vec::with_capacity(h * w);
    let mut unmatched: BTreeMap<[u8; 3], u64> = BTreeMap::new();
    for pixel in rgb.pixels() {
        let color = [pixel.0[0], pixel.0[1], pixel.0[2]];
        if let Some(&class) = exact.get(&color) {
            labels.push(class);
            continue;
        }
        let (class, dist) = nearest_palette_color(palette, color);
        if dist <= tolerance {
            labels.push(class);
        } else {
            *unmatched.entry(color).or_insert(0) += 1;
            labels.push(0); // placeholder; discarded on error
        }
    }

    if !unmatched.is_empty() {
        let total = unmatched.values().sum();
        let mut colors: Vec<([u8; 3], u64)> = unmatched.into_iter().collect();
        colors.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        return Err(Error::UnmatchedColors { colors, total, tolerance });
    }
    LabelMap::new(h, w, palette.num_classes(), labels)
}

fn nearest_palette_color(palette: &ClassPalette, color: [u8; 3]) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (i, (_, entry)) in palette.entries().iter().enumerate() {
        let mut d2 = 0.0;
        for k in 0..3 {
            let diff = entry[k] as f64 - color[k] as f64;
            d2 += diff * diff;
        }
        if d2 < best.1 {
            best = (i as u32, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Writes a label map as an 8-bit RGB PNG using the palette colors.
/// `load_labels(save_labels(x))` restores `x` exactly.
pub fn save_labels(labels: &LabelMap, palette: &ClassPalette, path: &Path) -> Result<()> {
    if labels.num_classes() != palette.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "label map has {} classes but palette has {}",
            labels.num_classes(),
            palette.num_classes()
        )));
    }
    let mut raw = Vec::with_capacity(labels.pixel_count() * 3);
    for &label in labels.labels() {
        raw.extend_from_slice(&palette.color(label as usize));
    }
    write_rgb8_png(path, labels.width() as u32, labels.height() as u32, &raw)
}

/// Writes an image tensor as PNG (gray/RGB/RGBA by channel count), mapping
/// each intensity to `round(v * 255)`.
pub fn save_image(image: &ImageTensor, path: &Path) -> Result<()> {
    let raw: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let color = match image.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        4 => ExtendedColorType::Rgba8,
        c => {
            return Err(Error::InvalidInput(format!(
                "cannot encode {c}-channel image as PNG"
            )))
        }
    };
    write_png(path, image.width() as u32, image.height() as u32, &raw, color)
}

fn write_rgb8_png(path: &Path, width: u32, height: u32, raw: &[u8]) -> Result<()> {
    write_png(path, width, height, raw, ExtendedColorType::Rgb8)
}

fn write_png(
    path: &Path,
    width: u32,
    height: u32,
    raw: &[u8],
    color: ExtendedColorType,
) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let writer = BufWriter::new(file);
    PngEncoder::new(writer)
        .write_image(raw, width, height, color)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
            other => Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(other.to_string()),
            },
        })
}

/// Parses palette text: one `name R G B` line per class, in class order.
/// Blank lines and `#` comments are skipped.
pub fn parse_palette_text(text: &str) -> Result<ClassPalette> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "palette line {}: expected 'name R G B', got '{line}'",
                lineno + 1
            )));
        }
        let mut rgb = [0u8; 3];
        for (slot, field) in rgb.iter_mut().zip(&fields[1..]) {
            *slot = field.parse::<u8>().map_err(|_| {
                Error::InvalidInput(format!(
                    "palette line {}: '{field}' is not a byte value",
                    lineno + 1
                ))
            })?;
        }
        entries.push((fields[0].to_string(), rgb));
    }
    ClassPalette::new(entries)
}

/// Loads a palette from a `name R G B` text file.
pub fn load_palette_file(path: &Path) -> Result<ClassPalette> {
    let text = fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_palette_text(&text)
}

/// JSON document for an [`EvalReport`]: `pixel_accuracy`, `confusion`
/// (row-major counts), `per_class_iou` (`null` for undefined classes) and
/// `mean_iou`.
pub fn eval_report_json(report: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "pixel_accuracy": report.pixel_accuracy(),
        "confusion": report.confusion(),
        "per_class_iou": report.per_class_iou(),
        "mean_iou": report.mean_iou(),
    })
}

/// JSON document for a sweep summary: ordered rows plus the monotonicity flag.
pub fn sweep_json(summary: &SweepSummary) -> serde_json::Value {
    serde_json::json!({
        "rows": summary.rows().iter().map(|row| serde_json::json!({
            "p": row.p,
            "pixel_accuracy": row.pixel_accuracy,
            "mean_iou": row.mean_iou,
        })).collect::<Vec<_>>(),
        "accuracy_non_decreasing": summary.accuracy_non_decreasing(),
    })
}

/// CSV table for a sweep summary, rows ordered by ascending `p`.
pub fn sweep_csv(summary: &SweepSummary) -> String {
    let mut out = String::from("p,pixel_accuracy,mean_iou\n");
    for row in summary.rows() {
        out.push_str(&format!("{},{},{}\n", row.p, row.pixel_accuracy, row.mean_iou));
    }
    out
}

/// Writes a JSON value to disk with a trailing newline.
pub fn write_json(value: &serde_json::Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("JSON serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes an [`EvalReport`] as JSON.
pub fn write_eval_report(report: &EvalReport, path: &Path) -> Result<()> {
    write_json(&eval_report_json(report), path)
}

/// Writes a sweep summary as JSON and CSV.
pub fn write_sweep_report(summary: &SweepSummary, json_path: &Path, csv_path: &Path) -> Result<()> {
    write_json(&sweep_json(summary), json_path)?;
    fs::write(csv_path, sweep_csv(summary))
        .map_err(|source| Error::Io { path: csv_path.to_path_buf(), source })
}
