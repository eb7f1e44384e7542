//! Run manifests, hashed inputs, PNG image grids and SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{io_err, HarnessError, Result};

pub const PNG: &str = "png";
pub const SVG: &str = "svg";
pub const JSONL: &str = "jsonl";
pub const CSV: &str = "csv";
pub const JSON: &str = "json";
pub const TEXT: &str = "txt";
pub const BIN: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashedFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the command's output directory.
    pub path: String,
    pub format: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub inputs: Vec<HashedFile>,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes a JSON manifest together with the binary blob next to it, if any.
pub fn hash_with_blob(manifest: &Path) -> Result<Vec<HashedFile>> {
    let mut out = vec![HashedFile {
        path: manifest.display().to_string(),
        sha256: sha256_file(manifest)?,
    }];
    let blob = manifest.with_extension("bin");
    if blob.exists() {
        out.push(HashedFile {
            path: blob.display().to_string(),
            sha256: sha256_file(&blob)?,
        });
    }
    Ok(out)
}

/// Collects output files of one command and writes `manifest.json` last.
#[derive(Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    command: String,
    outputs: Vec<(String, String)>,
    inputs: Vec<HashedFile>,
}

impl RunDir {
    pub fn create(out: &Path, command: &str) -> Result<Self> {
        let dir = out.join(command);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            dir,
            command: command.into(),
            outputs: Vec::new(),
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file already written under the run directory.
    pub fn record(&mut self, name: &str, format: &str) {
        self.outputs.push((name.into(), format.into()));
    }

    pub fn input(&mut self, manifest: &Path) -> Result<()> {
        if !manifest.exists() {
            return Err(HarnessError::MissingPath(manifest.to_path_buf()));
        }
        self.inputs.extend(hash_with_blob(manifest)?);
        Ok(())
    }

    pub fn finish(self, cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
        let mut outputs = Vec::new();
        for (name, format) in &self.outputs {
            outputs.push(OutputFile {
                path: name.clone(),
                format: format.clone(),
                sha256: sha256_file(&self.dir.join(name))?,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let mut config = cfg.clone();
        config.out_dir = None;
        config.seed = Some(seed);
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash: config.hash(),
            config,
            inputs: self.inputs,
            outputs,
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Pixel scale of image grids.
pub const GRID_ZOOM: u32 = 4;
/// Gap between panels, in output pixels.
const GRID_GAP: u32 = 2;

/// Renders rows of single-channel `side x side` panels with values in
/// `[0, 1]` (clamped) into a grayscale PNG.
pub fn write_image_grid(path: &Path, rows: &[Vec<ArrayD<f64>>]) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (ph, pw) = rows
        .iter()
        .flatten()
        .next()
        .map(|a| {
            let s = a.shape();
            (s[s.len() - 2] as u32, s[s.len() - 1] as u32)
        })
        .unwrap_or((0, 0));
    let cell_w = pw * GRID_ZOOM + GRID_GAP;
    let cell_h = ph * GRID_ZOOM + GRID_GAP;
    let mut img = GrayImage::from_pixel((cols * cell_w).max(1), (rows.len() as u32 * cell_h).max(1), Luma([255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let flat: Vec<f64> = panel.iter().copied().collect();
            for y in 0..ph * GRID_ZOOM {
                for x in 0..pw * GRID_ZOOM {
                    let v = flat[((y / GRID_ZOOM) * pw + x / GRID_ZOOM) as usize];
                    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel(c as u32 * cell_w + x, r as u32 * cell_h + y, Luma([g]));
                }
            }
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| crate::error::HarnessError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with a fixed `[0, 1]` y-range (accuracies) and a linear x-axis.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (x_lo, x_hi) = if x_lo.is_finite() && x_hi > x_lo { (x_lo, x_hi) } else { (0.0, 1.0) };
    let w = PLOT_W - 2.0 * MARGIN;
    let h = PLOT_H - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * w;
    let py = |y: f64| MARGIN + (1.0 - y.clamp(0.0, 1.0)) * h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        PLOT_W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<path d=\"M{m:.1},{m:.1} V{b:.1} H{r:.1}\" stroke=\"black\" fill=\"none\"/>",
        m = MARGIN,
        b = MARGIN + h,
        r = MARGIN + w
    );
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{y:.2}</text>",
            MARGIN - 4.0,
            py(y) + 3.0
        );
        let x = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{x:.3}</text>",
            px(x),
            MARGIN + h + 14.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        MARGIN + w / 2.0,
        PLOT_H - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 12 {:.1})\">{}</text>",
        MARGIN + h / 2.0,
        MARGIN + h / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" stroke=\"{color}\" fill=\"none\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        for &(x, y) in &ser.points {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y));
        }
        let ly = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            MARGIN + w - 110.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}
