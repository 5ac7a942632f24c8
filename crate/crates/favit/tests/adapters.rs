//! Adapter contracts: the convolutional bottleneck adapter, the CNN branch,
//! the token projection, and the gated local/global cross-attention.

mod common;

use common::{desk_config, seeded_image};
use favit::backbone::AdapterFlags;
use favit::capture::Capture;
use favit::data::{self, DomainParams};
use favit::gam::{gam_forward, gam_param_count};
use favit::lam::{self, local_attention_row, SpatialMode};
use favit::loss::{DetachCtx, FalConfig};
use favit::model::{cnn_scale_side, ModelBundle, ModelConfig};
use favit::tape::{NodeId, Tape};
use favit::tensor::Tensor;
use favit::train::{self, LossKind, StepSample, StepSpec};
use favit::vars;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ── GAM ──────────────────────────────────────────────────────────────

#[test]
fn gam_zero_init_produces_zero_deltas() {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 8).unwrap();
    let l = cfg.tokens();
    let d = cfg.embed_dim;
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let x = tape
        .input(Tensor::new(
            vec![l, d],
            (0..l * d).map(|i| (i as f32 * 0.31).sin()).collect::<Vec<_>>(),
        ))
        .unwrap();
    let (dq, dk, dv) = gam_forward(&mut tape, &cfg, &mvars.gams[0], x).unwrap();
    for id in [dq, dk, dv] {
        assert_eq!(tape.shape(id), &[16, 64]);
        assert!(tape.value(id).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn gam_parameter_count_is_exact() {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 8).unwrap();
    let mut count = 0usize;
    model.visit(&mut |p| {
        if p.name.starts_with("gam.0.") {
            count += p.value.numel();
        }
    });
    let d = cfg.embed_dim;
    assert_eq!(count, gam_param_count(d));
    // D(D/2)+D/2 + 9(D/2)²+D/2 + 3((D/2)D+D) for D = 64.
    assert_eq!(count, 64 * 32 + 32 + 9 * 32 * 32 + 32 + 3 * (32 * 64 + 64));
}

#[test]
fn gam_with_identity_spatial_kernel_acts_per_token() {
    // Hand-set weights: reduce is a 1×1 conv R, the 3×3 kernel is zero except
    // an identity at its center, expands are 1×1 convs E. The module then
    // collapses to an identical map applied to every token independently:
    // Δ(t) = E·gelu(gelu(R·t)). The oracle computes that map per token.
    let cfg = desk_config();
    let mut model = ModelBundle::init(cfg.clone(), 13).unwrap();
    let d = cfg.embed_dim;
    let half = d / 2;

    // Deterministic continuous-valued test weights.
    let rw: Vec<f32> = (0..half * d).map(|i| (i as f32 * 0.713).sin() * 0.2).collect();
    let ew: Vec<f32> = (0..d * half).map(|i| (i as f32 * 1.117).cos() * 0.2).collect();
    model.gams[0].reduce_w.value = Tensor::new(vec![half, d, 1, 1], rw.clone());
    model.gams[0].reduce_b.value = Tensor::zeros(&[half]);
    let mut spatial = vec![0.0f32; half * half * 9];
    for c in 0..half {
        spatial[(c * half + c) * 9 + 4] = 1.0; // center tap, channel identity
    }
    model.gams[0].spatial_w.value = Tensor::new(vec![half, half, 3, 3], spatial);
    model.gams[0].spatial_b.value = Tensor::zeros(&[half]);
    model.gams[0].expand_q_w.value = Tensor::new(vec![d, half, 1, 1], ew.clone());
    model.gams[0].expand_q_b.value = Tensor::zeros(&[d]);

    let l = cfg.tokens();
    let x_data: Vec<f32> = (0..l * d).map(|i| ((i * 13 % 31) as f32) * 0.05 - 0.7).collect();
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let x = tape.input(Tensor::new(vec![l, d], x_data.clone())).unwrap();
    let (dq, _, _) = gam_forward(&mut tape, &cfg, &mvars.gams[0], x).unwrap();
    let got = tape.value(dq);

    let gelu = |x: f64| -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    };
    for t in 0..l {
        // R·token, gelu, (identity spatial), gelu, E·.
        let mut mid = vec![0.0f64; half];
        for o in 0..half {
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += rw[o * d + i] as f64 * x_data[t * d + i] as f64;
            }
            mid[o] = gelu(gelu(acc));
        }
        for o in 0..d {
            let mut acc = 0.0f64;
            for i in 0..half {
                acc += ew[o * half + i] as f64 * mid[i];
            }
            let g = got.at2(t, o) as f64;
            assert!((g - acc).abs() <= 1e-4, "token {t} dim {o}: {g} vs {acc}");
        }
    }
}

#[test]
fn gam_rotation_symmetric_kernel_commutes_with_grid_rotation() {
    // With a rotation-symmetric 3×3 kernel, rotating the token grid by 90°
    // rotates ΔQ identically.
    let cfg = desk_config();
    let mut model = ModelBundle::init(cfg.clone(), 17).unwrap();
    let d = cfg.embed_dim;
    let half = d / 2;
    // Kernel: center tap c0 + uniform ring c1, per-channel identity mixing.
    let mut spatial = vec![0.0f32; half * half * 9];
    for c in 0..half {
        for k in 0..9 {
            spatial[(c * half + c) * 9 + k] = if k == 4 { 0.5 } else { 0.11 };
        }
    }
    model.gams[0].spatial_w.value = Tensor::new(vec![half, half, 3, 3], spatial);
    // Non-zero expands so deltas are visible.
    let ew: Vec<f32> = (0..d * half).map(|i| (i as f32 * 0.37).sin() * 0.15).collect();
    model.gams[0].expand_q_w.value = Tensor::new(vec![d, half, 1, 1], ew);

    let g = cfg.grid();
    let l = cfg.tokens();
    let x_data: Vec<f32> = (0..l * d).map(|i| (i as f32 * 0.211).sin()).collect();
    // Rotate grid 90° clockwise: destination (i, j) ← source (g−1−j, i).
    let mut rotated = vec![0.0f32; l * d];
    for i in 0..g {
        for j in 0..g {
            let src = (g - 1 - j) * g + i;
            let dst = i * g + j;
            rotated[dst * d..(dst + 1) * d].copy_from_slice(&x_data[src * d..(src + 1) * d]);
        }
    }

    let run = |data: &[f32]| -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let mvars = vars::register(&mut tape, &model).unwrap();
        let x = tape.input(Tensor::new(vec![l, d], data.to_vec())).unwrap();
        let (dq, _, _) = gam_forward(&mut tape, &cfg, &mvars.gams[0], x).unwrap();
        tape.value(dq).data().to_vec()
    };
    let base = run(&x_data);
    let rot = run(&rotated);
    for i in 0..g {
        for j in 0..g {
            let src = (g - 1 - j) * g + i;
            let dst = i * g + j;
            for c in 0..d {
                let a = base[src * d + c];
                let b = rot[dst * d + c];
                assert!((a - b).abs() <= 1e-5, "({i},{j}) ch {c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn gam_mlp_mode_zero_init_keeps_mlp_unchanged() {
    let cfg = ModelConfig {
        gam_mode: favit::model::GamMode::Mlp,
        ..desk_config()
    };
    let model = ModelBundle::init(cfg.clone(), 19).unwrap();
    let image = seeded_image(3);
    let mut cap = Capture::disabled();
    let with_gam = AdapterFlags {
        gam: true,
        spatial: SpatialMode::None,
    };
    let (a, _) = common::run_forward(&model, &with_gam, &image, &mut cap);
    let (b, _) = common::run_forward(&model, &AdapterFlags::none(), &image, &mut cap);
    assert_eq!(bits(&a), bits(&b));
}

// ── CNN branch ───────────────────────────────────────────────────────

#[test]
fn cnn_scale_shapes_match_stride_arithmetic() {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 23).unwrap();
    assert_eq!(cnn_scale_side(64, 0), 16);
    assert_eq!(cnn_scale_side(64, 1), 8);
    assert_eq!(cnn_scale_side(64, 2), 4);
    let image = seeded_image(12);
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let img = tape.input(image).unwrap();
    let scales =
        favit::cnn::cnn_branch_forward(&mut tape, &mvars.cnn_stem, &mvars.cnn_blocks, img, 3)
            .unwrap();
    assert_eq!(tape.shape(scales[0]), &[64, 16, 16]);
    assert_eq!(tape.shape(scales[1]), &[128, 8, 8]);
    assert_eq!(tape.shape(scales[2]), &[256, 4, 4]);
}

#[test]
fn cnn_zero_image_zero_bias_gives_zero_features() {
    let cfg = desk_config();
    let mut model = ModelBundle::init(cfg.clone(), 23).unwrap();
    model.visit_mut(&mut |p| {
        if p.name.starts_with("cnn.") && p.name.ends_with(".bias") {
            p.value = Tensor::zeros(p.value.shape());
        }
    });
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let img = tape.input(Tensor::zeros(&[3, 64, 64])).unwrap();
    let scales =
        favit::cnn::cnn_branch_forward(&mut tape, &mvars.cnn_stem, &mvars.cnn_blocks, img, 3)
            .unwrap();
    for s in scales {
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn cnn_stem_matches_naive_conv_stack_oracle() {
    // Run the stem on a 3×16×16 crop and compare against an independent
    // nested-loop conv + gelu evaluation.
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 29).unwrap();
    let full = seeded_image(31);
    let mut crop = vec![0.0f32; 3 * 16 * 16];
    for c in 0..3 {
        for y in 0..16 {
            for x in 0..16 {
                crop[(c * 16 + y) * 16 + x] = full.data()[(c * 64 + y) * 64 + x];
            }
        }
    }

    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let img = tape.input(Tensor::new(vec![3, 16, 16], crop.clone())).unwrap();
    let mut x = img;
    for layer in &mvars.cnn_stem {
        let y = tape.conv2d(x, layer.weight, layer.bias, layer.stride, layer.pad).unwrap();
        x = tape.gelu(y).unwrap();
    }
    let got = tape.value(x).data().to_vec();

    // Oracle.
    let gelu = |x: f64| -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    };
    let conv = |input: &[f64],
                cin: usize,
                h: usize,
                w: usize,
                weight: &Tensor<f32>,
                bias: &Tensor<f32>,
                stride: usize,
                pad: usize| -> (Vec<f64>, usize, usize) {
        let cout = weight.shape()[0];
        let kh = weight.shape()[2];
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kh) / stride + 1;
        let mut out = vec![0.0f64; cout * ho * wo];
        for oc in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.data()[oc] as f64;
                    for ic in 0..cin {
                        for di in 0..kh {
                            for dj in 0..kh {
                                let ih = (oh * stride + di) as isize - pad as isize;
                                let iw = (ow * stride + dj) as isize - pad as isize;
                                if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                    let widx = ((oc * cin + ic) * kh + di) * kh + dj;
                                    acc += input[(ic * h + ih as usize) * w + iw as usize]
                                        * weight.data()[widx] as f64;
                                }
                            }
                        }
                    }
                    out[(oc * ho + oh) * wo + ow] = gelu(acc);
                }
            }
        }
        (out, ho, wo)
    };
    let input: Vec<f64> = crop.iter().map(|&v| v as f64).collect();
    let s0 = &model.cnn.stem[0];
    let (mid, h1, w1) = conv(&input, 3, 16, 16, &s0.weight.value, &s0.bias.value, s0.stride, s0.pad);
    let s1 = &model.cnn.stem[1];
    let (want, _, _) = conv(&mid, 16, h1, w1, &s1.weight.value, &s1.bias.value, s1.stride, s1.pad);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want.iter()) {
        assert!((*g as f64 - w).abs() <= 1e-3, "{g} vs {w}");
    }
}

// ── Token projection ─────────────────────────────────────────────────

#[test]
fn projection_block_partition_matches_ramp_oracle() {
    // Labeled ramp input x[c, i, j] = c·10000 + i·100 + j: after the cell
    // flatten, row (gi, gj) must contain exactly the values of its cell in
    // (channel, row, col) order.
    let c = 2;
    let s = 8;
    let grid = 4;
    let cell = s / grid;
    let data: Vec<f32> = (0..c * s * s)
        .map(|idx| {
            let ch = idx / (s * s);
            let rem = idx % (s * s);
            (ch * 10000 + (rem / s) * 100 + rem % s) as f32
        })
        .collect();
    let mut tape = Tape::<f32>::new();
    let x = tape.input(Tensor::new(vec![c, s, s], data)).unwrap();
    let flat = tape.patch_flatten(x, grid).unwrap();
    assert_eq!(tape.shape(flat), &[16, c * cell * cell]);
    let fv = tape.value(flat);
    for gi in 0..grid {
        for gj in 0..grid {
            let row = gi * grid + gj;
            let mut k = 0;
            for ch in 0..c {
                for di in 0..cell {
                    for dj in 0..cell {
                        let want = (ch * 10000 + (gi * cell + di) * 100 + (gj * cell + dj)) as f32;
                        assert_eq!(fv.at2(row, k), want);
                        k += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn projection_degenerate_cell_is_plain_linear_map() {
    // S = √L: each cell is one pixel, so the projection is a plain C→D
    // linear map of the channel vector.
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 37).unwrap();
    let grid = cfg.grid(); // 4
    let c = 256; // scale 2 channels; S = 4 = √L
    let data: Vec<f32> = (0..c * grid * grid).map(|i| (i as f32 * 0.013).sin()).collect();
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let x = tape.input(Tensor::new(vec![c, grid, grid], data.clone())).unwrap();
    let tokens = favit::cnn::project_to_tokens(&mut tape, &mvars.lams[2], x, grid).unwrap();
    let got = tape.value(tokens);

    let w = &model.lams[2].proj_w.value;
    let b = model.lams[2].proj_b.value.data();
    for gi in 0..grid {
        for gj in 0..grid {
            let l = gi * grid + gj;
            for j in 0..cfg.embed_dim {
                let mut acc = b[j];
                for ch in 0..c {
                    acc += data[ch * grid * grid + gi * grid + gj] * w.at2(ch, j);
                }
                let diff = (got.at2(l, j) - acc).abs();
                assert!(diff <= 1e-4, "token {l} dim {j}");
            }
        }
    }
}

#[test]
fn desk_projection_widths() {
    // Scale 1: S = 16, cell 4×4, flatten length 64·16 = 1024 → D = 64.
    let cfg = desk_config();
    let model = ModelBundle::init(cfg, 41).unwrap();
    assert_eq!(model.lams[0].proj_w.value.shape(), &[1024, 64]);
    assert_eq!(model.lams[1].proj_w.value.shape(), &[512, 64]);
    assert_eq!(model.lams[2].proj_w.value.shape(), &[256, 64]);
}

// ── LAM ──────────────────────────────────────────────────────────────

fn lam_fixture(seed: u64) -> (ModelConfig, ModelBundle<f32>, Vec<f32>, Vec<f32>) {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), seed).unwrap();
    let l = cfg.tokens();
    let d = cfg.embed_dim;
    let x_vit: Vec<f32> = (0..l * d).map(|i| (i as f32 * 0.171).sin() * 0.6).collect();
    let x_cnn: Vec<f32> = (0..l * d).map(|i| (i as f32 * 0.233).cos() * 0.6).collect();
    (cfg, model, x_vit, x_cnn)
}

fn run_lam(
    cfg: &ModelConfig,
    model: &ModelBundle<f32>,
    x_vit: &[f32],
    x_cnn: &[f32],
    mode: SpatialMode,
    capture: &mut Capture,
) -> Vec<f32> {
    let l = cfg.tokens();
    let d = cfg.embed_dim;
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, model).unwrap();
    let xv = tape.input(Tensor::new(vec![l, d], x_vit.to_vec())).unwrap();
    let xc = tape.input(Tensor::new(vec![l, d], x_cnn.to_vec())).unwrap();
    let out = lam::lam_inject(&mut tape, cfg, &mvars.lams[0], xv, xc, mode, 0, capture).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn lam_beta_zero_is_bitwise_identity() {
    let (cfg, model, x_vit, x_cnn) = lam_fixture(43);
    let mut cap = Capture::disabled();
    let out = run_lam(&cfg, &model, &x_vit, &x_cnn, SpatialMode::Lam, &mut cap);
    assert_eq!(bits(&out), bits(&x_vit));
}

#[test]
fn lam_sigma_zero_gate_is_half() {
    let (cfg, mut model, x_vit, x_cnn) = lam_fixture(47);
    model.lams[0].beta.value = Tensor::scalar(1.0);
    let mut cap = Capture::enabled_new();
    let _ = run_lam(&cfg, &model, &x_vit, &x_cnn, SpatialMode::Lam, &mut cap);
    for rec in &cap.lam {
        assert_eq!(rec.gate, 0.5);
        // A_final = 0.5·(A_global + A_local), elementwise.
        for i in 0..16 {
            for j in 0..16 {
                let want = 0.5 * (rec.a_global.at2(i, j) + rec.a_local.at2(i, j));
                assert!((rec.a_final.at2(i, j) - want).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn lam_gate_convexity() {
    // Every entry of A_final lies between the corresponding entries of
    // A_global and A_local, for a non-trivial gate value.
    let (cfg, mut model, x_vit, x_cnn) = lam_fixture(53);
    model.lams[0].beta.value = Tensor::scalar(0.7);
    model.lams[0].sigma.value = Tensor::scalar(1.3);
    let mut cap = Capture::enabled_new();
    let _ = run_lam(&cfg, &model, &x_vit, &x_cnn, SpatialMode::Lam, &mut cap);
    assert!(!cap.lam.is_empty());
    for rec in &cap.lam {
        for i in 0..16 {
            for j in 0..16 {
                let g = rec.a_global.at2(i, j);
                let l = rec.a_local.at2(i, j);
                let f = rec.a_final.at2(i, j);
                let (lo, hi) = if g <= l { (g, l) } else { (l, g) };
                assert!(f >= lo - 1e-7 && f <= hi + 1e-7);
            }
        }
    }
}

#[test]
fn lam_local_map_is_content_independent() {
    let (cfg, mut model, x_vit, x_cnn) = lam_fixture(59);
    model.lams[0].beta.value = Tensor::scalar(0.5);
    let mut cap1 = Capture::enabled_new();
    let _ = run_lam(&cfg, &model, &x_vit, &x_cnn, SpatialMode::Lam, &mut cap1);
    // Perturb both feature streams; A_local must not move (A_global will).
    let x_vit2: Vec<f32> = x_vit.iter().map(|v| v * 1.7 + 0.05).collect();
    let x_cnn2: Vec<f32> = x_cnn.iter().map(|v| v * -0.9 + 0.02).collect();
    let mut cap2 = Capture::enabled_new();
    let _ = run_lam(&cfg, &model, &x_vit2, &x_cnn2, SpatialMode::Lam, &mut cap2);
    for (a, b) in cap1.lam.iter().zip(cap2.lam.iter()) {
        assert_eq!(bits(a.a_local.data()), bits(b.a_local.data()));
        assert_ne!(bits(a.a_global.data()), bits(b.a_global.data()));
    }
}

#[test]
fn lam_single_head_matches_direct_equation_oracle() {
    // Single head, L = 4 (grid 2), random weights, β = 1: the output must
    // match a direct evaluation of gated cross-attention with quadratic
    // positional scores.
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 16,
        embed_dim: 6,
        depth: 1,
        num_heads: 1,
        mlp_ratio: 2,
        lam_injection_blocks: vec![0],
        ..ModelConfig::default()
    };
    assert_eq!(cfg.tokens(), 4);
    let mut model = ModelBundle::init(cfg.clone(), 61).unwrap();
    model.lams[0].beta.value = Tensor::scalar(1.0);
    model.lams[0].sigma.value = Tensor::scalar(0.4);
    let l = 4;
    let d = 6;
    let x_vit: Vec<f32> = (0..l * d).map(|i| (i as f32 * 0.377).sin()).collect();
    let x_cnn: Vec<f32> = (0..l * d).map(|i| (i as f32 * 0.533).cos()).collect();

    let mut cap = Capture::disabled();
    let got = run_lam(&cfg, &model, &x_vit, &x_cnn, SpatialMode::Lam, &mut cap);

    // Oracle in f64.
    let wq = &model.lams[0].wq[0].value;
    let wk = &model.lams[0].wk[0].value;
    let wv = &model.lams[0].wv.value;
    let sigma = model.lams[0].sigma.value.data()[0] as f64;
    let gate = 1.0 / (1.0 + (-sigma).exp());
    let matp = |x: &[f32], w: &Tensor<f32>| -> Vec<f64> {
        let (r, c) = (l, w.shape()[1]);
        let mut out = vec![0.0f64; r * c];
        for i in 0..r {
            for j in 0..c {
                for k in 0..d {
                    out[i * c + j] += x[i * d + k] as f64 * w.at2(k, j) as f64;
                }
            }
        }
        out
    };
    let q = matp(&x_vit, wq);
    let k = matp(&x_cnn, wk);
    let v = matp(&x_cnn, wv);
    let dh = d; // one head
    let scale = 1.0 / (dh as f64).sqrt();
    let grid = 2;
    let mut want = vec![0.0f64; l * d];
    for a in 0..l {
        let mut scores: Vec<f64> = (0..l)
            .map(|b| (0..dh).map(|kk| q[a * dh + kk] * k[b * dh + kk]).sum::<f64>() * scale)
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for s in &mut scores {
            *s = (*s - mx).exp() / z;
        }
        // Positional row for direction (−1, −1) (head 0 of the cycle).
        let local = local_attention_row((a / grid, a % grid), (-1, -1), grid, true).unwrap();
        for b in 0..l {
            let a_final = (1.0 - gate) * scores[b] + gate * local[b] as f64;
            for c in 0..d {
                want[a * d + c] += a_final * v[b * d + c];
            }
        }
        for c in 0..d {
            want[a * d + c] += x_vit[a * d + c] as f64;
        }
    }
    for (g, w) in got.iter().zip(want.iter()) {
        assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn whole_cnn_branch_is_inert_at_initialization() {
    // β = 0 at every injection: the full model with the spatial path enabled
    // equals the plain backbone bitwise (the branch contributes nothing).
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 67).unwrap();
    let image = seeded_image(8);
    let mut cap = Capture::disabled();
    let lam_only = AdapterFlags {
        gam: false,
        spatial: SpatialMode::Lam,
    };
    let (a, _) = common::run_forward(&model, &lam_only, &image, &mut cap);
    let (b, _) = common::run_forward(&model, &AdapterFlags::none(), &image, &mut cap);
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn beta_receives_gradient_despite_identity_init() {
    // ∂loss/∂β is generically nonzero at β = 0: the injection trains from
    // the very first step.
    let cfg = desk_config();
    let mut model = ModelBundle::init(cfg.clone(), 71).unwrap();
    let flags = AdapterFlags::full();
    train::apply_strategy(&mut model, train::Strategy::GamLam, flags, cfg.gam_mode);

    let src = DomainParams::source();
    let real = data::generate_real(500, &src, 1);
    let fake = data::make_fake(&real, 500, 501, &src).unwrap();
    let samples: Vec<StepSample> = vec![
        StepSample {
            image: real.image.clone(),
            label: 0,
            pair_id: 0,
        },
        StepSample {
            image: fake.image.clone(),
            label: 1,
            pair_id: 0,
        },
    ];
    let spec = StepSpec {
        samples: &samples,
        flags,
        loss: LossKind::CeFal,
        fal: FalConfig::default(),
        epoch: 2,
        force_fal_value: false,
    };
    let mut tape = Tape::<f32>::new();
    let mut detach = DetachCtx::record();
    let built = spec.build(&mut tape, &model, &mut detach).unwrap();
    tape.backward(built.total).unwrap();

    let beta_ids: Vec<NodeId> = built.vars.lams.iter().map(|l| l.beta).collect();
    for (p, id) in beta_ids.iter().enumerate() {
        let g = tape.grad(*id).expect("beta gradient present")[0];
        assert!(g.abs() > 0.0, "injection {p}: zero gradient at beta");
    }
}
