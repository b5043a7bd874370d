//! Acceptance suite: one test per release criterion. Each prints a
//! `ACCEPTANCE <n> PASS` line on success so a full run reads as a checklist.

mod common;

use common::*;

use cenhdr::graph::Graph;
use cenhdr::metrics;
use cenhdr::model::{self, build_model, AttentionVariant, ModelConfig};
use cenhdr::ops;
use cenhdr::pipeline::{self, Raster};
use cenhdr::profiler;
use cenhdr::tape::Tape;
use cenhdr::tensor::{Shape, Tensor, TensorOf};
use cenhdr::training::{self, TrainConfig, TrainControl};
use cenhdr::weights_io;

/// Criterion 1: default-config totals land within 2% of the published
/// 128.78 GMAccs at 1900x1060 and within 5% of the published 282,883
/// parameters, and the report prints the exact deviations.
#[test]
fn criterion_01_architecture_cost_reproduction() {
    let config = ModelConfig::default();
    let report = profiler::count_macs(&config, 1060, 1900).unwrap();

    let gmaccs = report.total_macs as f64 / 1e9;
    let mac_dev = (gmaccs - profiler::REFERENCE_GMACS_1900X1060).abs()
        / profiler::REFERENCE_GMACS_1900X1060;
    assert!(mac_dev <= 0.02, "GMAccs {gmaccs} deviates {:.2}% from 128.78", 100.0 * mac_dev);

    let params_dev = (report.total_params as f64 - profiler::REFERENCE_PARAMS as f64).abs()
        / profiler::REFERENCE_PARAMS as f64;
    assert!(
        params_dev <= 0.05,
        "params {} deviate {:.2}% from 282883",
        report.total_params,
        100.0 * params_dev
    );

    let text = report.to_text();
    assert!(text.contains("deviation"), "report must print deviations:\n{text}");
    assert!(text.contains("128.78") && text.contains("282883"));

    println!(
        "ACCEPTANCE 1 PASS: {} params ({:+.2}%), {:.2} GMAccs at 1900x1060 ({:+.2}%)",
        report.total_params,
        100.0 * (report.total_params as f64 / profiler::REFERENCE_PARAMS as f64 - 1.0),
        gmaccs,
        100.0 * (gmaccs / profiler::REFERENCE_GMACS_1900X1060 - 1.0),
    );
}

/// Criterion 2: fixed layers have the exact closed-form parameter counts and
/// the counter agrees with the constructed weights for 20 random configs.
#[test]
fn criterion_02_fixed_layer_exactness() {
    let report = profiler::count_params(&ModelConfig::default());
    let row = |name: &str| {
        report
            .rows
            .iter()
            .find(|r| r.name == name)
            .unwrap_or_else(|| panic!("missing row {name}"))
            .params
    };
    assert_eq!(row("conv_E1"), 880);
    assert_eq!(row("conv_E2"), 4_640);
    assert_eq!(row("conv_M1"), 18_496);
    assert_eq!(row("conv_M2"), 73_792);
    assert_eq!(row("conv_M3"), 36_928);
    assert_eq!(row("conv_M4"), 36_928);
    assert_eq!(row("conv_D"), 435);

    // deterministic pseudo-random config sweep
    let variants = [
        AttentionVariant::Scram,
        AttentionVariant::SpatialOnly,
        AttentionVariant::ChannelOnly,
        AttentionVariant::AhdrnetLike,
        AttentionVariant::None,
    ];
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = |m: usize| -> usize {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as usize) % m
    };
    for i in 0..20 {
        let e1 = 4 + next(13);
        let config = ModelConfig {
            encoder_channels: (e1, 4 + next(61)),
            merge_channels: 4 * e1,
            scram_spatial_channels: 1 + next(32),
            scram_hidden: (4 + next(61), 4 + next(61), 4 + next(61)),
            scram_shared_across_frames: next(2) == 1,
            conv_m1_shared: next(2) == 1,
            attention: variants[next(variants.len())],
            ..ModelConfig::default()
        };
        let weights = build_model(&config, i as u64).unwrap();
        assert_eq!(
            profiler::count_params(&config).total_params,
            weights.total_elements(),
            "config {i}: {config:?}"
        );
    }
    println!("ACCEPTANCE 2 PASS: fixed rows exact; counter == constructor on 20 random configs");
}

/// Criterion 3: the documented 4-channel pixel-shuffle case and the
/// shuffle/unshuffle identity on 100 random tensors.
#[test]
fn criterion_03_pixel_shuffle() {
    let x: Tensor = pattern(Shape::new(1, 4, 4, 4), -1.0, 1.0, 0.5);
    let y = ops::pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 1, 8, 8));

    let mut state = 12345u64;
    let mut next = |m: usize| -> usize {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
        ((state >> 33) as usize) % m
    };
    for i in 0..100 {
        let shape = Shape::new(1 + next(2), 4 * (1 + next(4)), 2 * (1 + next(5)), 2 * (1 + next(5)));
        let x: Tensor = pattern(shape, -2.0, 2.0, i as f64);
        let through = ops::pixel_unshuffle(&ops::pixel_shuffle(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(x.data(), through.data(), "unshuffle(shuffle(x)) != x for {shape}");
        let back = ops::pixel_shuffle(&ops::pixel_unshuffle(&x, 2).unwrap(), 2).unwrap();
        assert_eq!(x.data(), back.data(), "shuffle(unshuffle(x)) != x for {shape}");
    }
    println!("ACCEPTANCE 3 PASS: (1,4,4,4) -> (1,1,8,8); identity holds on 100 random tensors");
}

fn fd_loss_through_kernels(build: &dyn Fn(&mut Tape<f64>, &[cenhdr::tape::NodeId]) -> cenhdr::tape::NodeId, vals: &[TensorOf<f64>]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<_> = vals.iter().map(|v| Graph::<f64>::constant(&mut tape, v.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.value(loss).scalar_value().unwrap()
}

/// Finite-difference check of one taped subgraph against its analytic
/// gradients, for every element of every differentiable input.
fn fd_check(
    label: &str,
    inputs: Vec<TensorOf<f64>>,
    diff: Vec<bool>,
    build: impl Fn(&mut Tape<f64>, &[cenhdr::tape::NodeId]) -> cenhdr::tape::NodeId,
) {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if diff[i] {
                tape.param(format!("p{i}"), v.clone())
            } else {
                Graph::<f64>::constant(&mut tape, v.clone())
            }
        })
        .collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();

    let h = 1e-5;
    for (i, input) in inputs.iter().enumerate() {
        if !diff[i] {
            continue;
        }
        let g = grads.get(&format!("p{i}")).unwrap();
        for e in 0..input.shape().len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[e] -= h;
            let fd = (fd_loss_through_kernels(&build, &plus)
                - fd_loss_through_kernels(&build, &minus))
                / (2.0 * h);
            let an = g.data()[e];
            assert!(
                grads_close(an, fd, 1e-4),
                "{label}: input {i} elem {e}: analytic {an} vs fd {fd}"
            );
        }
    }
}

/// Criterion 4: forward kernels match brute-force oracles at 1e-5 over the
/// full stride/padding/dilation grid, and every differentiable primitive plus
/// the end-to-end toy model pass the finite-difference gradient check at 1e-4.
#[test]
fn criterion_04_kernel_correctness() {
    // conv2d forward vs the direct-sum oracle, all 12 parameter combos
    let x64: TensorOf<f64> = pattern(Shape::new(2, 3, 9, 8), -1.0, 1.0, 0.1);
    let w64: TensorOf<f64> = pattern(Shape::new(4, 3, 3, 3), -0.5, 0.5, 0.7);
    let b64: TensorOf<f64> = pattern(Shape::new(1, 4, 1, 1), -0.2, 0.2, 1.3);
    for stride in [1usize, 2] {
        for padding in [0usize, 1, 2] {
            for dilation in [1usize, 2] {
                let got = ops::conv2d(&x64, &w64, &b64, stride, padding, dilation).unwrap();
                let want = conv2d_oracle(&x64, &w64, &b64, stride, padding, dilation);
                assert_eq!(got.shape(), want.shape());
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() <= 1e-5, "conv s{stride} p{padding} d{dilation}");
                }
            }
        }
    }

    // linear and global_avg_pool vs loop oracles
    let xv: TensorOf<f64> = pattern(Shape::new(2, 64, 1, 1), -1.0, 1.0, 2.0);
    let wv: TensorOf<f64> = pattern(Shape::new(120, 64, 1, 1), -0.3, 0.3, 2.5);
    let bv: TensorOf<f64> = pattern(Shape::new(1, 120, 1, 1), -0.1, 0.1, 3.0);
    let got = ops::linear(&xv, &wv, &bv).unwrap();
    for n in 0..2 {
        for o in 0..120 {
            let mut acc = bv.data()[o];
            for i in 0..64 {
                acc += xv.at(n, i, 0, 0) * wv.at(o, i, 0, 0);
            }
            assert!((got.at(n, o, 0, 0) - acc).abs() <= 1e-5);
        }
    }
    let xp: TensorOf<f64> = pattern(Shape::new(2, 5, 6, 7), -1.0, 1.0, 4.0);
    let got = ops::global_avg_pool(&xp).unwrap();
    for n in 0..2 {
        for c in 0..5 {
            let mean = xp.plane(n, c).iter().sum::<f64>() / 42.0;
            assert!((got.at(n, c, 0, 0) - mean).abs() <= 1e-5);
        }
    }

    // finite-difference gradients of every differentiable primitive
    let full = Shape::new(2, 4, 6, 6);
    let target: TensorOf<f64> = pattern(full, 2.0, 3.0, 9.0);

    for (stride, padding, dilation) in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 2)] {
        let x: TensorOf<f64> = pattern(Shape::new(2, 3, 6, 6), -1.0, 1.0, 0.2);
        let w: TensorOf<f64> = pattern(Shape::new(2, 3, 3, 3), -0.5, 0.5, 0.9);
        let b: TensorOf<f64> = pattern(Shape::new(1, 2, 1, 1), -0.2, 0.2, 1.4);
        let out_shape =
            ops::conv2d(&x, &w, &b, stride, padding, dilation).unwrap().shape();
        let t: TensorOf<f64> = pattern(out_shape, 2.0, 3.0, 1.9);
        fd_check(
            "conv2d",
            vec![x, w, b, t],
            vec![true, true, true, false],
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], stride, padding, dilation).unwrap();
                tape.l1_loss(y, ids[3]).unwrap()
            },
        );
    }

    fd_check(
        "pixel_shuffle",
        vec![pattern(Shape::new(2, 4, 3, 3), -1.0, 1.0, 0.3), pattern(Shape::new(2, 1, 6, 6), 2.0, 3.0, 0.8)],
        vec![true, false],
        |tape, ids| {
            let y = tape.pixel_shuffle(ids[0], 2).unwrap();
            tape.l1_loss(y, ids[1]).unwrap()
        },
    );
    fd_check(
        "global_avg_pool",
        vec![pattern(full, -1.0, 1.0, 0.4), pattern(Shape::new(2, 4, 1, 1), 2.0, 3.0, 1.1)],
        vec![true, false],
        |tape, ids| {
            let y = tape.global_avg_pool(ids[0]).unwrap();
            tape.l1_loss(y, ids[1]).unwrap()
        },
    );
    fd_check(
        "linear",
        vec![
            pattern(Shape::new(2, 5, 1, 1), -1.0, 1.0, 0.5),
            pattern(Shape::new(3, 5, 1, 1), -0.5, 0.5, 1.0),
            pattern(Shape::new(1, 3, 1, 1), -0.2, 0.2, 1.5),
            pattern(Shape::new(2, 3, 1, 1), 2.0, 3.0, 2.0),
        ],
        vec![true, true, true, false],
        |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2]).unwrap();
            tape.l1_loss(y, ids[3]).unwrap()
        },
    );
    // relu inputs bounded away from the kink
    let mut relu_in: TensorOf<f64> = pattern(full, 0.2, 1.0, 0.6);
    for (i, v) in relu_in.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    fd_check("relu", vec![relu_in, target.clone()], vec![true, false], |tape, ids| {
        let y = tape.relu(ids[0]);
        tape.l1_loss(y, ids[1]).unwrap()
    });
    fd_check(
        "sigmoid",
        vec![pattern(full, -2.0, 2.0, 0.7), target.clone()],
        vec![true, false],
        |tape, ids| {
            let y = tape.sigmoid(ids[0]);
            tape.l1_loss(y, ids[1]).unwrap()
        },
    );
    for b_shape in [full, Shape::new(2, 1, 6, 6), Shape::new(2, 4, 1, 1)] {
        let a: TensorOf<f64> = pattern(full, 0.3, 1.0, 0.8);
        let b: TensorOf<f64> = pattern(b_shape, 0.3, 1.0, 1.6);
        fd_check(
            "add",
            vec![a.clone(), b.clone(), target.clone()],
            vec![true, true, false],
            |tape, ids| {
                let y = tape.add(ids[0], ids[1]).unwrap();
                tape.l1_loss(y, ids[2]).unwrap()
            },
        );
        fd_check("mul", vec![a, b, target.clone()], vec![true, true, false], |tape, ids| {
            let y = tape.mul(ids[0], ids[1]).unwrap();
            tape.l1_loss(y, ids[2]).unwrap()
        });
    }
    fd_check(
        "expand_channels",
        vec![pattern(Shape::new(2, 1, 6, 6), -1.0, 1.0, 0.9), target.clone()],
        vec![true, false],
        |tape, ids| {
            let y = tape.expand_channels(ids[0], 4).unwrap();
            tape.l1_loss(y, ids[1]).unwrap()
        },
    );
    fd_check(
        "concat",
        vec![
            pattern(Shape::new(2, 2, 6, 6), -1.0, 1.0, 1.0),
            pattern(Shape::new(2, 2, 6, 6), -1.0, 1.0, 1.2),
            target.clone(),
        ],
        vec![true, true, false],
        |tape, ids| {
            let y = tape.concat_channels(&[ids[0], ids[1]]).unwrap();
            tape.l1_loss(y, ids[2]).unwrap()
        },
    );
    {
        let a: TensorOf<f64> = pattern(full, 0.0, 1.0, 1.3);
        let b = a.map(|v| v + 0.4);
        fd_check("l1", vec![a, b], vec![true, true], |tape, ids| {
            tape.l1_loss(ids[0], ids[1]).unwrap()
        });
    }
    fd_check(
        "mu_law",
        vec![pattern(full, 0.05, 0.95, 1.4), target.clone()],
        vec![true, false],
        |tape, ids| {
            let y = tape.mu_law(ids[0], 5000.0).unwrap();
            tape.l1_loss(y, ids[1]).unwrap()
        },
    );

    // end-to-end toy model: d l1(forward(L), target) / d weights
    let config = toy_config();
    let weights64 = build_model(&config, 23).unwrap().cast::<f64>();
    let l1: TensorOf<f64> = pattern(Shape::new(1, 6, 8, 8), 0.0, 1.0, 3.1);
    let l2: TensorOf<f64> = pattern(Shape::new(1, 6, 8, 8), 0.0, 1.0, 3.2);
    let l3: TensorOf<f64> = pattern(Shape::new(1, 6, 8, 8), 0.0, 1.0, 3.3);
    let target: TensorOf<f64> = pattern(Shape::new(1, 3, 8, 8), 0.1, 0.9, 3.4);

    let mut tape: Tape<f64> = Tape::new();
    let bound = model::bind_trainable(&mut tape, &config, &weights64).unwrap();
    let (a, b, c) = (
        Graph::<f64>::constant(&mut tape, l1.clone()),
        Graph::<f64>::constant(&mut tape, l2.clone()),
        Graph::<f64>::constant(&mut tape, l3.clone()),
    );
    let pred = model::forward_graph(&mut tape, &config, &bound, &a, &b, &c).unwrap();
    let t = Graph::<f64>::constant(&mut tape, target.clone());
    let loss = tape.l1_loss(pred, t).unwrap();
    let grads = tape.backward(loss).unwrap();

    // forward for the FD side goes through the immediate-mode executor,
    // cross-checking the two execution paths at the same time
    let eval_loss = |weights: &cenhdr::model::WeightsOf<f64>| -> f64 {
        let out = model::forward(&config, weights, &l1, &l2, &l3).unwrap();
        ops::l1_loss(&out, &target).unwrap()
    };
    let h = 1e-5;
    let mut checked = 0usize;
    for (name, tensor) in weights64.iter() {
        let len = tensor.shape().len();
        let picks = [0, len / 3, len / 2, 2 * len / 3, len - 1];
        let g = grads.get(name).unwrap();
        for &e in picks.iter().take(len.min(picks.len())) {
            let mut plus = weights64.clone();
            plus.as_map_mut().get_mut(name).unwrap().data_mut()[e] += h;
            let mut minus = weights64.clone();
            minus.as_map_mut().get_mut(name).unwrap().data_mut()[e] -= h;
            let fd = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * h);
            let an = g.data()[e];
            assert!(
                grads_close(an, fd, 1e-4),
                "end-to-end {name}[{e}]: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
    }
    println!(
        "ACCEPTANCE 4 PASS: conv/linear/pool oracles at 1e-5; all primitive gradients and \
         {checked} end-to-end weight gradients at 1e-4"
    );
}

/// Criterion 5: gamma projection values, μ-law endpoints and the
/// knowledge-distillation convex-combination identity.
#[test]
fn criterion_05_formula_fidelity() {
    let half = Raster::filled(1, 1, 0.5);
    let v = pipeline::gamma_project(&half, 1.0, 2.2).unwrap().data()[0];
    assert!((v - 0.21764).abs() <= 1e-5);

    let probe = Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, 0.01, 1.0]).unwrap();
    let t = ops::mu_law(&probe, 5000.0).unwrap();
    assert!(t.data()[0].abs() <= 1e-7);
    assert!((t.data()[1] - 0.46163).abs() <= 1e-5);
    assert!((t.data()[2] - 1.0).abs() <= 1e-6);

    // kd(alpha) == alpha * kd(1) + (1 - alpha) * kd(0), and endpoint reductions
    let shape = Shape::new(1, 3, 6, 6);
    let pred: Tensor = pattern(shape, 0.1, 0.9, 0.3);
    let gt: Tensor = pattern(shape, 0.1, 0.9, 1.3);
    let teacher: Tensor = pattern(shape, 0.1, 0.9, 2.3);
    let d_gt = training::kd_loss(&pred, &gt, None, 0.2, 5000.0).unwrap();
    let d_teacher = training::kd_loss(&pred, &teacher, None, 0.2, 5000.0).unwrap();
    for alpha in [0.0, 0.2, 0.5, 0.77, 1.0] {
        let blended = training::kd_loss(&pred, &gt, Some(&teacher), alpha, 5000.0).unwrap();
        assert!(
            (blended - (alpha * d_gt + (1.0 - alpha) * d_teacher)).abs() <= 1e-6,
            "alpha {alpha}"
        );
    }
    assert!(
        (training::kd_loss(&pred, &gt, Some(&teacher), 1.0, 5000.0).unwrap() - d_gt).abs()
            <= 1e-9
    );
    assert!(
        (training::kd_loss(&pred, &gt, Some(&teacher), 0.0, 5000.0).unwrap() - d_teacher).abs()
            <= 1e-9
    );
    println!("ACCEPTANCE 5 PASS: gamma and mu-law oracle values; KD convex identity at 1e-6");
}

/// Criterion 6: the stage shapes at 256x256 match the documented pipeline
/// exactly: (16,256,256) -> (32,128,128) -> (64,128,128) -> (16,256,256) ->
/// (3,256,256).
#[test]
fn criterion_06_shape_pipeline() {
    let config = ModelConfig::default();
    let weights = build_model(&config, 3).unwrap();
    let l: Tensor = pattern(Shape::new(1, 6, 256, 256), 0.0, 1.0, 0.2);

    let (s, f) = model::encode(&config, &weights, &l).unwrap();
    assert_eq!(s.shape(), Shape::new(1, 16, 256, 256));
    assert_eq!(f.shape(), Shape::new(1, 32, 128, 128));

    let a = model::scram(&config, &weights, &f, &f, model::NonRefFrame::Under).unwrap();
    assert_eq!(a.shape(), Shape::new(1, 32, 128, 128));

    let merged = model::merge(&config, &weights, &f, &f, &f).unwrap();
    assert_eq!(merged.shape(), Shape::new(1, 64, 128, 128));

    let d = ops::pixel_shuffle(&merged, 2).unwrap();
    assert_eq!(d.shape(), Shape::new(1, 16, 256, 256));

    let out = model::forward(&config, &weights, &l, &l, &l).unwrap();
    assert_eq!(out.shape(), Shape::new(1, 3, 256, 256));
    println!("ACCEPTANCE 6 PASS: 256x256 intermediates match the documented pipeline");
}

/// Criterion 7: overfitting one synthetic 64x64 patch reaches 35 dB mu-PSNR
/// within 2,000 Adam steps at lr 1e-4 with the full-size architecture.
#[test]
fn criterion_07_desk_scale_training() {
    let config = ModelConfig::default();
    let scene = synthetic_scene("overfit", 64, 64);
    let tc = TrainConfig {
        patch_size: 64,
        stride: 64,
        batch_size: 1,
        epochs: 2000,
        kd_enabled: false,
        lr0: 1e-4,
        lr_fixed_epochs: usize::MAX, // hold lr at 1e-4 for the whole run
        seed: 7,
        ..TrainConfig::default()
    };
    let mut weights = build_model(&config, 11).unwrap();

    let gt = scene.bracket.gt_hdr.clone().unwrap();
    let bracket = scene.bracket.clone();
    let eval_cfg = config.clone();
    let mut best = f64::NEG_INFINITY;
    let mut reached_at = None;
    training::train(std::slice::from_ref(&scene), &config, &mut weights, &tc, |stats, w| {
        if (stats.epoch + 1) % 25 != 0 {
            return TrainControl::Continue;
        }
        let ([l1, l2, l3], pad) = pipeline::assemble_inputs(&bracket, eval_cfg.gamma).unwrap();
        let hdr = model::forward(&eval_cfg, w, &l1, &l2, &l3).unwrap();
        let pred = pipeline::crop_output(&hdr, &pad).unwrap();
        let mp = metrics::mu_psnr(&pred, &gt, 5000.0).unwrap();
        best = best.max(mp);
        if mp >= 35.0 {
            reached_at = Some(stats.epoch + 1);
            TrainControl::Stop
        } else {
            TrainControl::Continue
        }
    })
    .unwrap();

    let steps = reached_at
        .unwrap_or_else(|| panic!("mu-PSNR only reached {best:.2} dB within 2000 steps"));
    println!("ACCEPTANCE 7 PASS: 35 dB mu-PSNR reached after {steps} steps (best {best:.2} dB)");
}

/// Criterion 8: with KD enabled the first logged loss equals an independent
/// recomputation of the blended loss; with KD disabled teacher files are
/// provably never opened.
#[test]
fn criterion_08_kd_plumbing() {
    let config = toy_config();

    // constant-color scene: augmentation cannot change the inputs, so the
    // step-1 loss is reproducible without replaying the data pipeline RNG
    let gt = Raster::filled(16, 16, 0.35);
    let scene = scene_from_gt("kd", gt.clone());
    let teacher = Raster::filled(16, 16, 0.42);
    let scene = cenhdr::training::SceneSample {
        name: scene.name.clone(),
        bracket: scene.bracket.clone().with_teacher(teacher.clone()).unwrap(),
    };

    let tc = TrainConfig {
        patch_size: 16,
        stride: 16,
        batch_size: 1,
        epochs: 1,
        alpha: 0.2,
        kd_enabled: true,
        seed: 99,
        ..TrainConfig::default()
    };
    let mut weights = build_model(&config, 5).unwrap();
    let log = training::train(std::slice::from_ref(&scene), &config, &mut weights, &tc, |_, _| {
        TrainControl::Continue
    })
    .unwrap();
    let logged = log[0].loss;

    // independent recomputation through the immediate-mode path, in f64
    let initial = build_model(&config, 5).unwrap();
    let ([l1, l2, l3], _) = pipeline::assemble_inputs(&scene.bracket, config.gamma).unwrap();
    let pred = model::forward(&config, &initial, &l1, &l2, &l3).unwrap();
    let mu = 5000.0f64;
    let ln1mu = (1.0 + mu).ln();
    let t = |v: f32| ((1.0 + mu * v as f64).ln() / ln1mu);
    let l1_t = |a: &Tensor, target: f32| -> f64 {
        let tt = t(target);
        a.data().iter().map(|&p| (t(p) - tt).abs()).sum::<f64>() / a.data().len() as f64
    };
    let expect = 0.2 * l1_t(&pred, 0.35) + 0.8 * l1_t(&pred, 0.42);
    assert!(
        (logged - expect).abs() <= 1e-6,
        "step-1 loss {logged} vs independent recomputation {expect}"
    );

    // --no-kd must never open teacher files: make opening them an error
    let dir = tempfile::tempdir().unwrap();
    write_scene_dir(dir.path(), "scene", &scene, None);
    std::fs::create_dir(dir.path().join("scene").join("teacher.pfm")).unwrap();
    let (scenes, _) = training::load_dataset(
        dir.path(),
        &training::LoadOptions { load_teacher: false, teacher_dir: None },
    )
    .unwrap();
    assert!(scenes[0].bracket.teacher_hdr.is_none());
    let tc_nokd = TrainConfig { kd_enabled: false, ..tc };
    let mut weights = build_model(&config, 5).unwrap();
    training::train(&scenes, &config, &mut weights, &tc_nokd, |_, _| TrainControl::Stop)
        .expect("training must succeed without touching teacher.pfm");

    println!("ACCEPTANCE 8 PASS: step-1 KD loss matches Eq-style recomputation at 1e-6; no-KD never opens teachers");
}

/// Criterion 9: metric closed forms and compositional identities.
#[test]
fn criterion_09_metrics() {
    let zeros = Raster::filled(12, 12, 0.0);
    let halves = Raster::filled(12, 12, 0.5);
    let v = metrics::psnr(&zeros, &halves, 1.0).unwrap();
    assert!((v - 6.0206).abs() <= 1e-4, "PSNR {v}");

    let a = smooth_target(16, 16);
    assert!((metrics::ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-12);

    let ones = Raster::filled(12, 12, 1.0);
    let want = 1e-4 / (1.0 + 1e-4);
    assert!((metrics::ssim(&zeros, &ones).unwrap() - want).abs() <= 1e-7);

    let b = a.map(|x| (x * 0.9 + 0.03).clamp(0.0, 1.0));
    let ta = pipeline::mu_law(&a, 5000.0).unwrap();
    let tb = pipeline::mu_law(&b, 5000.0).unwrap();
    assert_eq!(
        metrics::mu_psnr(&a, &b, 5000.0).unwrap(),
        metrics::psnr(&ta, &tb, 1.0).unwrap()
    );
    assert_eq!(metrics::mu_ssim(&a, &b, 5000.0).unwrap(), metrics::ssim(&ta, &tb).unwrap());
    println!("ACCEPTANCE 9 PASS: PSNR/SSIM closed forms and exact mu-law composition");
}

/// Criterion 10: fixed-seed training determinism, lossless container and PFM
/// round trips, and the 500-run/50-warmup benchmark protocol with
/// FPS = 1/mean (at reduced resolution).
#[test]
fn criterion_10_determinism_and_formats() {
    let config = toy_config();
    let scene = synthetic_scene("det", 16, 16);
    let tc = TrainConfig {
        patch_size: 16,
        stride: 16,
        batch_size: 1,
        epochs: 5,
        kd_enabled: false,
        seed: 31,
        ..TrainConfig::default()
    };
    let run = || {
        let mut weights = build_model(&config, 8).unwrap();
        let log =
            training::train(std::slice::from_ref(&scene), &config, &mut weights, &tc, |_, _| {
                TrainControl::Continue
            })
            .unwrap();
        (training::loss_log_csv(&log), weights)
    };
    let (csv1, weights1) = run();
    let (csv2, weights2) = run();
    assert_eq!(csv1, csv2, "fixed-seed loss logs must be identical");

    // weight container round trip, bitwise
    let dir = tempfile::tempdir().unwrap();
    let wpath = dir.path().join("w.cenh");
    weights_io::save_weights(&weights1, &config, &wpath).unwrap();
    let (loaded, loaded_config) = weights_io::load_weights(&wpath).unwrap();
    assert_eq!(loaded_config, config);
    for (name, tensor) in weights2.iter() {
        let bits: Vec<u32> = tensor.data().iter().map(|v| v.to_bits()).collect();
        let got: Vec<u32> = loaded.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, got, "{name}");
    }

    // PFM round trip, bitwise
    let img = smooth_target(9, 7);
    let ppath = dir.path().join("img.pfm");
    cenhdr::image_io::write_pfm(&img, &ppath).unwrap();
    let back = cenhdr::image_io::read_pfm(&ppath).unwrap();
    let bits: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
    let got: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(bits, got);

    // benchmark protocol at reduced resolution
    let weights = build_model(&config, 8).unwrap();
    let stats = profiler::bench_runtime(&config, &weights, 32, 32, 500, 50, 4).unwrap();
    assert_eq!(stats.runs, 500);
    assert_eq!(stats.warmup, 50);
    assert!((stats.fps - 1.0 / stats.mean_s).abs() <= 1e-9 * stats.fps.max(1.0));
    println!(
        "ACCEPTANCE 10 PASS: deterministic training; lossless containers; bench 500/50 at {:.1} FPS",
        stats.fps
    );
}
