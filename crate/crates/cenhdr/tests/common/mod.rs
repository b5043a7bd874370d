//! Shared fixtures and independent oracles for the integration suites.
#![allow(dead_code)]

use cenhdr::model::ModelConfig;
use cenhdr::pipeline::{ExposureBracket, Raster};
use cenhdr::tensor::{Shape, TensorOf};
use cenhdr::training::SceneSample;

/// Deterministic pseudo-random values in `[lo, hi)` (test-local; independent
/// of the crate's RNG choices).
pub fn pattern<T: cenhdr::tensor::Element>(shape: Shape, lo: f64, hi: f64, phase: f64) -> TensorOf<T> {
    let mut i = 0.0f64;
    TensorOf::from_fn(shape, |_, _, _, _| {
        i += 1.0;
        let u = ((i * 12.9898 + phase).sin() * 43758.5453).fract().abs();
        T::from_f64(lo + (hi - lo) * u)
    })
}

/// Per-output-element convolution oracle: the direct nested-sum definition.
pub fn conv2d_oracle(
    input: &TensorOf<f64>,
    weight: &TensorOf<f64>,
    bias: &TensorOf<f64>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> TensorOf<f64> {
    let is = input.shape();
    let ws = weight.shape();
    let k = ws.h;
    let span = dilation * (k - 1) + 1;
    let h_out = (is.h + 2 * padding - span) / stride + 1;
    let w_out = (is.w + 2 * padding - span) / stride + 1;
    TensorOf::from_fn(Shape::new(is.n, ws.n, h_out, w_out), |n, co, oh, ow| {
        let mut acc = bias.data()[co];
        for ci in 0..is.c {
            for kh in 0..k {
                for kw in 0..k {
                    let ih = (oh * stride + kh * dilation) as i64 - padding as i64;
                    let iw = (ow * stride + kw * dilation) as i64 - padding as i64;
                    if ih >= 0 && (ih as usize) < is.h && iw >= 0 && (iw as usize) < is.w {
                        acc += input.at(n, ci, ih as usize, iw as usize)
                            * weight.at(co, ci, kh, kw);
                    }
                }
            }
        }
        acc
    })
}

/// Gradcheck acceptance rule: relative with an absolute floor.
pub fn grads_close(analytic: f64, fd: f64, rtol: f64) -> bool {
    (analytic - fd).abs() <= rtol * analytic.abs().max(fd.abs()).max(1e-3)
}

/// A small architecture for fast end-to-end runs.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder_channels: (4, 8),
        merge_channels: 16,
        scram_spatial_channels: 3,
        scram_hidden: (6, 6, 6),
        ..ModelConfig::default()
    }
}

/// Smooth mid-range HDR target.
pub fn smooth_target(w: usize, h: usize) -> Raster {
    Raster::from_fn(w, h, |x, y, ch| {
        let fx = x as f32 / w as f32;
        let fy = y as f32 / h as f32;
        let v = 0.5
            + 0.25 * (2.0 * std::f32::consts::PI * (fx + 0.3 * ch as f32)).sin()
            + 0.15 * (2.0 * std::f32::consts::PI * (fy * 1.5 + 0.2 * ch as f32)).cos();
        v.clamp(0.08, 0.92)
    })
}

/// A learnable synthetic scene: LDR frames are exposure-consistent renders of
/// the ground truth through the inverse of the gamma projection.
pub fn synthetic_scene(name: &str, w: usize, h: usize) -> SceneSample {
    let gt = smooth_target(w, h);
    scene_from_gt(name, gt)
}

pub fn scene_from_gt(name: &str, gt: Raster) -> SceneSample {
    let evs = [-2.0f64, 0.0, 2.0];
    let ldr: Vec<Raster> = evs
        .iter()
        .map(|ev| {
            let t = ev.exp2();
            gt.map(|v| (((v as f64) * t).powf(1.0 / 2.2)).clamp(0.0, 1.0) as f32)
        })
        .collect();
    let ldr: [Raster; 3] = ldr.try_into().unwrap();
    let bracket = ExposureBracket::from_evs(ldr, evs).unwrap().with_gt(gt).unwrap();
    SceneSample { name: name.to_string(), bracket }
}

/// Writes a scene directory in the on-disk dataset layout. `teacher` adds a
/// teacher.pfm; constant-color scenes keep step-1 losses augmentation-free.
pub fn write_scene_dir(
    root: &std::path::Path,
    name: &str,
    scene: &SceneSample,
    teacher: Option<&Raster>,
) {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    for (i, frame) in scene.bracket.ldr.iter().enumerate() {
        cenhdr::image_io::write_png8(frame, dir.join(format!("input_{}.png", i + 1))).unwrap();
    }
    let evs: Vec<String> =
        scene.bracket.exposure_times.iter().map(|t| format!("{}", t.log2())).collect();
    std::fs::write(dir.join("exposure.txt"), evs.join("\n")).unwrap();
    cenhdr::image_io::write_pfm(scene.bracket.gt_hdr.as_ref().unwrap(), dir.join("gt.pfm"))
        .unwrap();
    if let Some(t) = teacher {
        cenhdr::image_io::write_pfm(t, dir.join("teacher.pfm")).unwrap();
    }
}
