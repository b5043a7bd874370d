//! Fidelity metrics: PSNR and SSIM in the linear domain plus their μ-law
//! tone-mapped variants, and scene-set evaluation reports.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{self, ModelConfig, ModelWeights};
use crate::pipeline::{self, PipelineError, Raster};
use crate::training::SceneSample;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("images have different sizes: {w0}x{h0} vs {w1}x{h1}")]
    SizeMismatch { w0: usize, h0: usize, w1: usize, h1: usize },
    #[error("image {w}x{h} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { w: usize, h: usize, window: usize },
    #[error("prediction failed for scene `{scene}`: {detail}")]
    Predict { scene: String, detail: String },
    #[error("no scene in the dataset has ground truth")]
    NoGroundTruth,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn check_same_size(a: &Raster, b: &Raster) -> Result<(), MetricsError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MetricsError::SizeMismatch {
            w0: a.width(),
            h0: a.height(),
            w1: b.width(),
            h1: b.height(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels and pixels;
/// identical images give positive infinity.
pub fn psnr(a: &Raster, b: &Raster, peak: f64) -> Result<f64, MetricsError> {
    check_same_size(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR after μ-law tone mapping of both images.
pub fn mu_psnr(a: &Raster, b: &Raster, mu: f64) -> Result<f64, MetricsError> {
    psnr(&pipeline::mu_law(a, mu)?, &pipeline::mu_law(b, mu)?, 1.0)
}

fn to_gray(r: &Raster) -> Vec<f64> {
    r.data()
        .chunks_exact(3)
        .map(|px| (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0)
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode filtering with the 11-tap Gaussian window.
fn filter_valid(img: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = w - SSIM_WINDOW + 1;
    // horizontal pass
    let mut horiz = vec![0.0; out_w * h];
    for y in 0..h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * img[y * w + x + k];
            }
            horiz[y * out_w + x] = acc;
        }
    }
    // vertical pass
    let out_h = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Mean local structural similarity over an 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0). Images are reduced
/// to grayscale by the unweighted channel mean first.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64, MetricsError> {
    check_same_size(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::ImageTooSmall { w, h, window: SSIM_WINDOW });
    }
    let x = to_gray(a);
    let y = to_gray(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();

    let kernel = gaussian_kernel();
    let mu_x = filter_valid(&x, w, h, &kernel);
    let mu_y = filter_valid(&y, w, h, &kernel);
    let mu_xx = filter_valid(&xx, w, h, &kernel);
    let mu_yy = filter_valid(&yy, w, h, &kernel);
    let mu_xy = filter_valid(&xy, w, h, &kernel);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = mu_xx[i] - mx * mx;
        let var_y = mu_yy[i] - my * my;
        let cov = mu_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// SSIM after μ-law tone mapping of both images.
pub fn mu_ssim(a: &Raster, b: &Raster, mu: f64) -> Result<f64, MetricsError> {
    ssim(&pipeline::mu_law(a, mu)?, &pipeline::mu_law(b, mu)?)
}

/// Metric values for one scene (or the mean row).
#[derive(Clone, Debug, serde::Serialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub mu_psnr: f64,
    pub psnr: f64,
    pub mu_ssim: f64,
    pub ssim: f64,
}

/// Per-scene rows plus the arithmetic mean.
#[derive(Debug, serde::Serialize)]
pub struct MetricReport {
    pub rows: Vec<SceneMetrics>,
    pub mean: SceneMetrics,
    /// Scenes skipped for missing ground truth.
    pub skipped: Vec<String>,
}

pub const CSV_HEADER: &str = "scene,mu_psnr,psnr,mu_ssim,ssim";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.scene, row.mu_psnr, row.psnr, row.mu_ssim, row.ssim
            )
            .expect("in-memory write");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .rows
            .iter()
            .map(|r| r.scene.len())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        writeln!(
            out,
            "{:<name_w$}  {:>10}  {:>10}  {:>8}  {:>8}",
            "scene", "mu-PSNR", "PSNR", "mu-SSIM", "SSIM"
        )
        .expect("in-memory write");
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(
                out,
                "{:<name_w$}  {:>10.4}  {:>10.4}  {:>8.4}  {:>8.4}",
                row.scene, row.mu_psnr, row.psnr, row.mu_ssim, row.ssim
            )
            .expect("in-memory write");
        }
        if !self.skipped.is_empty() {
            writeln!(out, "skipped (no ground truth): {}", self.skipped.join(", "))
                .expect("in-memory write");
        }
        out
    }
}

/// Evaluates a prediction function over every scene that has ground truth.
/// Scenes without ground truth are skipped and listed in the report.
pub fn evaluate_with<F>(
    scenes: &[SceneSample],
    mu: f64,
    mut predict: F,
) -> Result<MetricReport, MetricsError>
where
    F: FnMut(&SceneSample) -> Result<Raster, String>,
{
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for scene in scenes {
        let Some(gt) = scene.bracket.gt_hdr.as_ref() else {
            skipped.push(scene.name.clone());
            continue;
        };
        let pred = predict(scene).map_err(|detail| MetricsError::Predict {
            scene: scene.name.clone(),
            detail,
        })?;
        rows.push(SceneMetrics {
            scene: scene.name.clone(),
            mu_psnr: mu_psnr(&pred, gt, mu)?,
            psnr: psnr(&pred, gt, 1.0)?,
            mu_ssim: mu_ssim(&pred, gt, mu)?,
            ssim: ssim(&pred, gt)?,
        });
    }
    if rows.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    let n = rows.len() as f64;
    let mean = SceneMetrics {
        scene: "mean".to_string(),
        mu_psnr: rows.iter().map(|r| r.mu_psnr).sum::<f64>() / n,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mu_ssim: rows.iter().map(|r| r.mu_ssim).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    Ok(MetricReport { rows, mean, skipped })
}

/// Runs the model over each full-resolution scene and scores it against the
/// ground truth.
pub fn evaluate(
    scenes: &[SceneSample],
    config: &ModelConfig,
    weights: &ModelWeights,
    mu: f64,
) -> Result<MetricReport, MetricsError> {
    evaluate_with(scenes, mu, |scene| {
        let ([l1, l2, l3], pad) =
            pipeline::assemble_inputs(&scene.bracket, config.gamma).map_err(|e| e.to_string())?;
        let hdr =
            model::forward(config, weights, &l1, &l2, &l3).map_err(|e| e.to_string())?;
        pipeline::crop_output(&hdr, &pad).map_err(|e| e.to_string())
    })
}
