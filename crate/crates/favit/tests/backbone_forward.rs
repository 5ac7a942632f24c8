//! Backbone forward-pass contracts: patch embedding, attention, pooling,
//! classification, and the zero-init identity of the adapters.

mod common;

use common::{desk_config, run_forward, seeded_image, tiny_config};
use favit::backbone::{self, AdapterFlags, SaDeltas};
use favit::capture::Capture;
use favit::model::{ModelBundle, ModelConfig};
use favit::tape::Tape;
use favit::tensor::Tensor;
use favit::vars;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn desk_config_has_sixteen_tokens() {
    let cfg = desk_config();
    assert_eq!(cfg.tokens(), 16);
    assert_eq!(cfg.grid(), 4);
    assert_eq!(cfg.head_dim(), 16);
}

#[test]
fn zero_image_and_zero_pos_gives_repeated_bias_row() {
    let cfg = desk_config();
    let mut model = ModelBundle::init(cfg.clone(), 3).unwrap();
    // Zero the position embedding, set a recognizable bias.
    let d = cfg.embed_dim;
    model.backbone.patch.pos.value = Tensor::zeros(&[cfg.tokens(), d]);
    let bias: Vec<f32> = (0..d).map(|i| i as f32 * 0.01 - 0.3).collect();
    model.backbone.patch.bias.value = Tensor::new(vec![d], bias.clone());

    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let img = tape
        .input(Tensor::zeros(&[3, cfg.image_size, cfg.image_size]))
        .unwrap();
    let tokens = backbone::patch_embed(&mut tape, &cfg, &mvars.patch, img).unwrap();
    let tv = tape.value(tokens);
    assert_eq!(tv.shape(), &[16, 64]);
    for l in 0..cfg.tokens() {
        for j in 0..d {
            assert_eq!(tv.at2(l, j), bias[j]);
        }
    }
}

#[test]
fn patch_embed_matches_unfold_then_linear_oracle() {
    // Random 3×32×32 input, P = 16 → L = 4 tokens. The oracle extracts each
    // patch by explicit loops and applies the projection by hand.
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 16,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        lam_injection_blocks: vec![],
        ..ModelConfig::default()
    };
    let model = ModelBundle::init(cfg.clone(), 11).unwrap();
    let image: Vec<f32> = (0..3 * 32 * 32)
        .map(|i| ((i as f32) * 0.619).sin() * 0.5 + 0.5)
        .collect();

    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let img = tape
        .input(Tensor::new(vec![3, 32, 32], image.clone()))
        .unwrap();
    let tokens = backbone::patch_embed(&mut tape, &cfg, &mvars.patch, img).unwrap();
    let got = tape.value(tokens);

    let p = cfg.patch_size;
    let w = &model.backbone.patch.weight.value;
    let b = model.backbone.patch.bias.value.data();
    let pos = &model.backbone.patch.pos.value;
    for gi in 0..2 {
        for gj in 0..2 {
            let l = gi * 2 + gj;
            // Unfold patch (gi, gj) in (channel, row, col) order.
            let mut flat = Vec::with_capacity(3 * p * p);
            for c in 0..3 {
                for di in 0..p {
                    for dj in 0..p {
                        flat.push(image[(c * 32 + gi * p + di) * 32 + gj * p + dj]);
                    }
                }
            }
            for j in 0..cfg.embed_dim {
                let mut acc = 0.0f32;
                for (r, &v) in flat.iter().enumerate() {
                    acc += v * w.at2(r, j);
                }
                acc += b[j] + pos.at2(l, j);
                let diff = (got.at2(l, j) - acc).abs();
                assert!(diff <= 1e-4, "token {l} dim {j}: {} vs {acc}", got.at2(l, j));
            }
        }
    }
}

#[test]
fn absent_deltas_equal_zero_deltas_bitwise() {
    let cfg = tiny_config();
    let model = ModelBundle::init(cfg.clone(), 5).unwrap();
    let l = cfg.tokens();
    let d = cfg.embed_dim;
    let x_data: Vec<f32> = (0..l * d).map(|i| ((i as f32) * 0.37).sin()).collect();

    let run = |with_zero_deltas: bool| -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let mvars = vars::register(&mut tape, &model).unwrap();
        let x = tape
            .input(Tensor::new(vec![l, d], x_data.clone()))
            .unwrap();
        let deltas = if with_zero_deltas {
            let z1 = tape.input(Tensor::zeros(&[l, d])).unwrap();
            let z2 = tape.input(Tensor::zeros(&[l, d])).unwrap();
            let z3 = tape.input(Tensor::zeros(&[l, d])).unwrap();
            SaDeltas::Tensors(z1, z2, z3)
        } else {
            SaDeltas::None
        };
        let mut capture = Capture::disabled();
        let y = backbone::self_attention(&mut tape, &cfg, &mvars.blocks[0], x, deltas, &mut capture, 0)
            .unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(bits(&run(false)), bits(&run(true)));
}

#[test]
fn singleton_sequence_attention_is_identity_weight() {
    // L = 1: the softmax of a single score is exactly 1, so the output is
    // the residual plus W_O(LN(x)·W_V).
    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 16,
        embed_dim: 8,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        lam_injection_blocks: vec![],
        ..ModelConfig::default()
    };
    assert_eq!(cfg.tokens(), 1);
    let model = ModelBundle::init(cfg.clone(), 9).unwrap();
    let x_data: Vec<f32> = (0..8).map(|i| (i as f32 * 0.7).cos()).collect();

    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let x = tape.input(Tensor::new(vec![1, 8], x_data.clone())).unwrap();
    let mut capture = Capture::enabled_new();
    let y = backbone::self_attention(
        &mut tape,
        &cfg,
        &mvars.blocks[0],
        x,
        SaDeltas::None,
        &mut capture,
        0,
    )
    .unwrap();

    // Attention weights are exactly 1.
    for rec in &capture.sa {
        assert_eq!(rec.matrix.data(), &[1.0]);
    }

    // Direct evaluation: y = x + LN(x)·W_V·W_O.
    let b = &model.backbone.blocks[0];
    let ln = |x: &[f32]| -> Vec<f32> {
        let mean: f32 = x.iter().sum::<f32>() / x.len() as f32;
        let var: f32 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / x.len() as f32;
        let istd = 1.0 / (var + 1e-6).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, v)| {
                (v - mean) * istd * b.ln1_gamma.value.data()[j] + b.ln1_beta.value.data()[j]
            })
            .collect()
    };
    let t = ln(&x_data);
    let matv = |m: &Tensor<f32>, v: &[f32]| -> Vec<f32> {
        let (r, c) = (m.shape()[0], m.shape()[1]);
        (0..c)
            .map(|j| (0..r).map(|i| v[i] * m.at2(i, j)).sum())
            .collect()
    };
    let value = matv(&b.wv.value, &t);
    let out = matv(&b.wo.value, &value);
    let want: Vec<f32> = x_data.iter().zip(out.iter()).map(|(a, o)| a + o).collect();
    for (g, w) in tape.value(y).data().iter().zip(want.iter()) {
        assert!((g - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn single_head_attention_matches_direct_oracle() {
    // Single head, D = 4, L = 2, random weights: compare against a direct
    // softmax(QKᵀ/√D)·V evaluation with the residual and output projection.
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 16,
        embed_dim: 4,
        depth: 1,
        num_heads: 1,
        mlp_ratio: 2,
        lam_injection_blocks: vec![],
        ..ModelConfig::default()
    };
    assert_eq!(cfg.tokens(), 4); // 2×2 grid; take L = 4 for the desk grid
    let model = ModelBundle::init(cfg.clone(), 21).unwrap();
    let l = cfg.tokens();
    let d = cfg.embed_dim;
    let x_data: Vec<f32> = (0..l * d).map(|i| ((i * 29 % 17) as f32) * 0.1 - 0.8).collect();

    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let x = tape.input(Tensor::new(vec![l, d], x_data.clone())).unwrap();
    let mut capture = Capture::disabled();
    let y = backbone::self_attention(
        &mut tape,
        &cfg,
        &mvars.blocks[0],
        x,
        SaDeltas::None,
        &mut capture,
        0,
    )
    .unwrap();
    let got = tape.value(y).data().to_vec();

    // Oracle in f64.
    let b = &model.backbone.blocks[0];
    let get = |m: &Tensor<f32>, i: usize, j: usize| m.at2(i, j) as f64;
    let mut t = vec![0.0f64; l * d];
    for i in 0..l {
        let row: Vec<f64> = (0..d).map(|j| x_data[i * d + j] as f64).collect();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + 1e-6).sqrt();
        for j in 0..d {
            t[i * d + j] = (row[j] - mean) * istd * b.ln1_gamma.value.data()[j] as f64
                + b.ln1_beta.value.data()[j] as f64;
        }
    }
    let proj = |w: &Tensor<f32>| -> Vec<f64> {
        let mut out = vec![0.0f64; l * d];
        for i in 0..l {
            for j in 0..d {
                for k in 0..d {
                    out[i * d + j] += t[i * d + k] * get(w, k, j);
                }
            }
        }
        out
    };
    let (q, k, v) = (proj(&b.wq.value), proj(&b.wk.value), proj(&b.wv.value));
    let scale = 1.0 / (d as f64 / cfg.num_heads as f64).sqrt();
    let mut attn_out = vec![0.0f64; l * d];
    for i in 0..l {
        let scores: Vec<f64> = (0..l)
            .map(|jj| {
                (0..d).map(|kk| q[i * d + kk] * k[jj * d + kk]).sum::<f64>() * scale
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for jj in 0..l {
            let a = exps[jj] / z;
            for kk in 0..d {
                attn_out[i * d + kk] += a * v[jj * d + kk];
            }
        }
    }
    for i in 0..l {
        for j in 0..d {
            let mut o = 0.0f64;
            for kk in 0..d {
                o += attn_out[i * d + kk] * get(&b.wo.value, kk, j);
            }
            let want = x_data[i * d + j] as f64 + o;
            let g = got[i * d + j] as f64;
            assert!((g - want).abs() <= 1e-5, "({i},{j}): {g} vs {want}");
        }
    }
}

#[test]
fn block_token_shapes_are_l_by_d() {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 1).unwrap();
    let image = seeded_image(100);
    let mut cap = Capture::disabled();
    let (pooled, blocks) = run_forward(&model, &AdapterFlags::full(), &image, &mut cap);
    assert_eq!(pooled.len(), 64);
    assert_eq!(blocks.len(), 8);
    for b in &blocks {
        assert_eq!(b.len(), 16 * 64);
    }
}

#[test]
fn adapters_at_zero_init_are_bitwise_invisible() {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 77).unwrap();
    for seed in [0u64, 1, 2, 3, 4] {
        let image = seeded_image(seed);
        let mut cap = Capture::disabled();
        let (plain, _) = run_forward(&model, &AdapterFlags::none(), &image, &mut cap);
        let (full, _) = run_forward(&model, &AdapterFlags::full(), &image, &mut cap);
        assert_eq!(bits(&plain), bits(&full), "seed {seed}");
    }
}

#[test]
fn classify_contracts() {
    let cfg = tiny_config();
    let mut model = ModelBundle::init(cfg.clone(), 2).unwrap();
    let d = cfg.embed_dim;

    // Zero weights and bias → p_fake = 0.5.
    model.head.weight.value = Tensor::zeros(&[2, d]);
    model.head.bias.value = Tensor::zeros(&[2]);
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model).unwrap();
    let pooled = tape
        .input(Tensor::new(
            vec![d],
            (0..d).map(|i| i as f32 * 0.1).collect::<Vec<_>>(),
        ))
        .unwrap();
    let cls = backbone::classify(&mut tape, &mvars.head, pooled).unwrap();
    assert_eq!(tape.value(cls.p_fake).data()[0], 0.5);

    // Logits [0, ln 3] → p_fake = 0.75 (softmax closed form).
    let mut tape = Tape::<f32>::new();
    let logits = tape
        .input(Tensor::new(vec![1, 2], vec![0.0, 3.0f32.ln()]))
        .unwrap();
    let probs = tape.softmax_rows(logits).unwrap();
    let p = tape.index(probs, 1).unwrap();
    assert!((tape.value(p).data()[0] - 0.75).abs() <= 1e-6);
}

#[test]
fn pooled_is_permutation_covariant_with_positions() {
    // Permuting patches together with their position embeddings leaves the
    // mean-pooled output unchanged (adapters detached: the spatial modules
    // are deliberately not permutation-equivariant).
    let cfg = tiny_config();
    let model = ModelBundle::init(cfg.clone(), 31).unwrap();
    let l = cfg.tokens();
    let image = favit::data::generate_real(9, &favit::data::DomainParams::source(), 1).image;

    // Build a permuted twin: permute image patches and position rows by the
    // same permutation.
    let perm: Vec<usize> = (0..l).map(|i| (i * 7 + 3) % l).collect();
    {
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..l).collect::<Vec<_>>(), "perm must be a bijection");
    }
    let g = cfg.grid();
    let p = cfg.patch_size;
    let n = cfg.image_size;
    let mut perm_image = vec![0.0f32; 3 * n * n];
    for dst in 0..l {
        let src = perm[dst];
        let (di, dj) = (dst / g, dst % g);
        let (si, sj) = (src / g, src % g);
        for c in 0..3 {
            for r in 0..p {
                for cc in 0..p {
                    perm_image[(c * n + di * p + r) * n + dj * p + cc] =
                        image.data()[(c * n + si * p + r) * n + sj * p + cc];
                }
            }
        }
    }
    let mut perm_model = model.clone();
    let d = cfg.embed_dim;
    let mut pos = vec![0.0f32; l * d];
    for dst in 0..l {
        let src = perm[dst];
        for j in 0..d {
            pos[dst * d + j] = model.backbone.patch.pos.value.at2(src, j);
        }
    }
    perm_model.backbone.patch.pos.value = Tensor::new(vec![l, d], pos);

    let mut cap = Capture::disabled();
    let (pooled_a, _) = run_forward(&model, &AdapterFlags::none(), &image, &mut cap);
    let (pooled_b, _) = run_forward(
        &perm_model,
        &AdapterFlags::none(),
        &Tensor::new(vec![3, n, n], perm_image),
        &mut cap,
    );
    for (a, b) in pooled_a.iter().zip(pooled_b.iter()) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn attention_rows_sum_to_one_in_every_block_and_head() {
    let cfg = desk_config();
    let model = ModelBundle::init(cfg.clone(), 4).unwrap();
    let image = seeded_image(55);
    let mut cap = Capture::enabled_new();
    let _ = run_forward(&model, &AdapterFlags::full(), &image, &mut cap);
    assert_eq!(cap.sa.len(), 8 * 4);
    assert_eq!(cap.lam.len(), 3 * 4);
    for rec in &cap.sa {
        let m = &rec.matrix;
        for i in 0..m.shape()[0] {
            let s: f32 = (0..m.shape()[1]).map(|j| m.at2(i, j)).sum();
            assert!((s - 1.0).abs() <= 1e-6, "block {} head {}", rec.block, rec.head);
        }
    }
    for rec in &cap.lam {
        for m in [&rec.a_local, &rec.a_global, &rec.a_final] {
            for i in 0..m.shape()[0] {
                let s: f32 = (0..m.shape()[1]).map(|j| m.at2(i, j)).sum();
                assert!((s - 1.0).abs() <= 1e-6, "lam point {} head {}", rec.point, rec.head);
            }
        }
    }
}
