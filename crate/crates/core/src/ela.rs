//! Error level analysis: the absolute residual between an image and its JPEG
//! recompression at a known quality, `ELA(x) = |x − JPEG_q(x)|`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::imaging::ImageBuffer;
use crate::jpeg::{self, Subsampling};

pub const DEFAULT_QUALITY: u8 = 90;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElaConfig {
    /// Recompression quality, 1..=100.
    pub quality: u8,
    /// Gain applied only by [`ElaImage::to_display`]; never to training data.
    pub amplification: f64,
    pub subsampling: Subsampling,
}

impl Default for ElaConfig {
    fn default() -> Self {
        ElaConfig {
            quality: DEFAULT_QUALITY,
            amplification: 1.0,
            subsampling: Subsampling::S420,
        }
    }
}

impl ElaConfig {
    pub fn with_quality(quality: u8) -> Self {
        ElaConfig {
            quality,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=100).contains(&self.quality) {
            return Err(config_err!("ELA quality must be in 1..=100, got {}", self.quality));
        }
        if !(self.amplification >= 1.0 && self.amplification.is_finite()) {
            return Err(config_err!("ELA amplification must be >= 1, got {}", self.amplification));
        }
        Ok(())
    }
}

/// Per-sample residual with the geometry of its source image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElaImage(ImageBuffer);

impl ElaImage {
    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn samples(&self) -> &[u8] {
        self.0.pixels()
    }

    /// The raw residual as an RGB image (what training reads).
    pub fn as_image(&self) -> &ImageBuffer {
        &self.0
    }

    pub fn into_image(self) -> ImageBuffer {
        self.0
    }

    /// Residual scaled by `gain` and clamped to 255, for viewing.
    pub fn to_display(&self, gain: f64) -> ImageBuffer {
        let px = self.0.pixels().iter().map(|&v| (f64::from(v) * gain).round().min(255.0) as u8).collect();
        ImageBuffer::new(self.width(), self.height(), px).expect("same geometry")
    }

    /// Mean residual over the pixel rectangle `[x0, x1) × [y0, y1)`, or over its
    /// complement when `inside` is false.
    pub fn mean_region(&self, (x0, y0, x1, y1): (usize, usize, usize, usize), inside: bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..self.height() {
            for x in 0..self.width() {
                if (x >= x0 && x < x1 && y >= y0 && y < y1) == inside {
                    sum += self.0.pixel(x, y).iter().map(|&v| f64::from(v)).sum::<f64>();
                    n += 3;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Encode-then-decode through the pinned codec.
pub fn jpeg_roundtrip(img: &ImageBuffer, quality: u8, subsampling: Subsampling) -> Result<ImageBuffer> {
    jpeg::roundtrip(img, quality, subsampling)
}

pub fn ela_transform(img: &ImageBuffer, cfg: &ElaConfig) -> Result<ElaImage> {
    cfg.validate()?;
    let recompressed = jpeg_roundtrip(img, cfg.quality, cfg.subsampling)?;
    let px = img
        .pixels()
        .iter()
        .zip(recompressed.pixels())
        .map(|(&a, &b)| a.abs_diff(b))
        .collect();
    Ok(ElaImage(ImageBuffer::new(img.width(), img.height(), px)?))
}

/// Summary written beside the residual tree as `ela_report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElaReport {
    pub processed: usize,
    pub failed: Vec<String>,
    pub quality: u8,
    pub subsampling: Subsampling,
}

pub const REPORT_FILE: &str = "ela_report.json";

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        .unwrap_or(false)
}

/// Image files under `root`, as root-relative paths in sorted order.
pub(crate) fn image_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")))
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            files.push(entry.path().strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    files.sort();
    Ok(files)
}

fn portable(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Mirrors `src_root` into `dst_root`, replacing each JPEG/PNG with its
/// residual stored as PNG (`<stem>.png`). Unreadable files are listed in the
/// report and skipped. `threads` caps the worker count (`None` = rayon default).
pub fn batch_preprocess(src_root: &Path, dst_root: &Path, cfg: &ElaConfig, threads: Option<usize>) -> Result<ElaReport> {
    cfg.validate()?;
    if !src_root.is_dir() {
        return Err(Error::Data(format!("source {} is not a directory", src_root.display())));
    }
    let files = image_files(src_root)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no JPEG/PNG files under {}", src_root.display())));
    }
    std::fs::create_dir_all(dst_root).map_err(|e| Error::io(dst_root, e))?;

    let work = |rel: &PathBuf| -> (PathBuf, Result<()>) {
        let out = dst_root.join(rel).with_extension("png");
        let res = ImageBuffer::open(&src_root.join(rel))
            .and_then(|img| ela_transform(&img, cfg))
            .and_then(|ela| ela.as_image().save_png(&out));
        (out, res)
    };
    let results: Vec<(PathBuf, Result<()>)> = match threads {
        Some(1) => files.iter().map(work).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| config_err!("thread pool: {e}"))?
            .install(|| files.par_iter().map(work).collect()),
        None => files.par_iter().map(work).collect(),
    };

    let mut report = ElaReport {
        processed: 0,
        failed: Vec::new(),
        quality: cfg.quality,
        subsampling: cfg.subsampling,
    };
    let mut written = std::collections::HashSet::new();
    for (rel, (out, res)) in files.iter().zip(results) {
        match res {
            Ok(()) if written.insert(out) => report.processed += 1,
            _ => report.failed.push(portable(rel)),
        }
    }
    let json = serde_json::to_string_pretty(&report)?;
    let report_path = dst_root.join(REPORT_FILE);
    std::fs::write(&report_path, json + "\n").map_err(|e| Error::io(report_path, e))?;
    Ok(report)
}
