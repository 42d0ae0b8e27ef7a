mod common;

use common::*;
use tokidle_core::token_idle::{KeepSchedule, Mode};
use tokidle_core::vit::{ffn_block, mhsa_block, patch_embed, transformer_block, vit_forward, ModelParams, ViTConfig};
use tokidle_core::Tensor;

#[test]
fn toy_image_embeds_to_seventeen_rows() {
    let cfg = ViTConfig::toy();
    let p = ModelParams::init(&cfg, 1).unwrap();
    let img = random_image(&mut rng(0), &cfg);
    let x = patch_embed(&img, &p.stem, &cfg).unwrap();
    assert_eq!(x.dims(), &[17, 64]);
}

#[test]
fn zero_projection_yields_bias_and_class_token() {
    let cfg = small_config();
    let mut p = ModelParams::init(&cfg, 2).unwrap();
    p.stem.patch_w = Tensor::zeros(p.stem.patch_w.dims());
    p.stem.pos_embed = Tensor::zeros(p.stem.pos_embed.dims());
    p.stem.patch_b = random_matrix(&mut rng(3), 1, cfg.embed_dim, 1.0);
    let img = random_image(&mut rng(4), &cfg);
    let x = patch_embed(&img, &p.stem, &cfg).unwrap();
    assert_eq!(x.row(0), p.stem.cls_token.data());
    for r in 1..x.rows() {
        assert_eq!(x.row(r), p.stem.patch_b.data());
    }
}

#[test]
fn one_hot_projection_on_constant_image() {
    let cfg = small_config();
    let mut p = ModelParams::init(&cfg, 2).unwrap();
    let mut w = Tensor::zeros(p.stem.patch_w.dims());
    w.set(5, 3, 1.0);
    p.stem.patch_w = w;
    p.stem.pos_embed = Tensor::zeros(p.stem.pos_embed.dims());
    let s = cfg.image_size;
    let img = Tensor::filled(&[s, s, 1], 0.75);
    let x = patch_embed(&img, &p.stem, &cfg).unwrap();
    for r in 1..x.rows() {
        for c in 0..cfg.embed_dim {
            assert_eq!(x.get(r, c), if c == 3 { 0.75 } else { 0.0 });
        }
    }
}

#[test]
fn wrong_image_extents_are_rejected() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 2).unwrap();
    assert!(patch_embed(&Tensor::zeros(&[8, 8, 1]), &p.stem, &cfg).is_err());
}

#[test]
fn singleton_attention() {
    let mut r = rng(5);
    let w = random_layer(&mut r, 4, 8);
    let x = random_matrix(&mut r, 1, 4, 1.0);
    let (y, a) = mhsa_block(&x, &w, 2).unwrap();
    for h in a.heads() {
        assert_eq!(h.data(), &[1.0]);
    }
    // With one token the attention output is the normalized token's value projection.
    let h = ref_layer_norm(x.row(0), w.norm1_gamma.data(), w.norm1_beta.data());
    let v = ref_linear(&h, &w.w_v, &w.b_v);
    let expected: Vec<f64> = ref_linear(&v, &w.w_o, &w.b_o).iter().zip(x.row(0)).map(|(p, q)| p + q).collect();
    for (a, b) in y.row(0).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_tokens_identical_outputs() {
    let mut r = rng(6);
    let w = random_layer(&mut r, 4, 8);
    let row = random_matrix(&mut r, 1, 4, 1.0);
    let x = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
    let (y, _) = transformer_block(&x, &w, 2).unwrap();
    assert_eq!(y.row(0), y.row(1));
}

#[test]
fn two_token_single_head_by_hand() {
    // C = 2 so LayerNorm maps every non-constant row to (±1, ∓1) up to eps.
    let mut w = zero_layer(2, 4);
    w.w_q = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    w.w_k = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]).unwrap();
    w.w_v = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    w.w_o = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
    let (y, a) = mhsa_block(&x, &w, 1).unwrap();

    let s0 = 1.0 / (0.25f64 + 1e-6).sqrt() * 0.5;
    let s1 = 1.0 / (1.0f64 + 1e-6).sqrt();
    let h = [[s0, -s0], [-s1, s1]];
    let q = h;
    let k = [[2.0 * h[0][0], h[0][1]], [2.0 * h[1][0], h[1][1]]];
    let v = [
        [h[0][0] + 3.0 * h[0][1], 2.0 * h[0][0] + 4.0 * h[0][1]],
        [h[1][0] + 3.0 * h[1][1], 2.0 * h[1][0] + 4.0 * h[1][1]],
    ];
    let scale = 2f64.sqrt();
    for i in 0..2 {
        let l0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) / scale;
        let l1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) / scale;
        let p0 = 1.0 / (1.0 + (l1 - l0).exp());
        let p1 = 1.0 - p0;
        assert!((a.heads()[0].get(i, 0) - p0).abs() < 1e-12);
        assert!((a.heads()[0].get(i, 1) - p1).abs() < 1e-12);
        for c in 0..2 {
            let expected = x.get(i, c) + p0 * v[0][c] + p1 * v[1][c];
            assert!((y.get(i, c) - expected).abs() < 1e-12, "row {i} col {c}");
        }
    }
}

#[test]
fn block_matches_reference_loops() {
    let mut r = rng(7);
    for heads in [1, 2, 4] {
        let w = random_layer(&mut r, 8, 16);
        let x = random_matrix(&mut r, 6, 8, 1.5);
        let (y, a) = transformer_block(&x, &w, heads).unwrap();
        let (ry, ra) = ref_block(&rows_of(&x), &w, heads);
        assert!(max_abs_diff(&rows_of(&y), &ry) < 1e-12);
        for (h, rh) in a.heads().iter().zip(&ra) {
            assert!(max_abs_diff(&rows_of(h), rh) < 1e-12);
        }
    }
}

#[test]
fn zero_ffn_is_residual() {
    let mut r = rng(8);
    let w = zero_layer(4, 8);
    let x = random_matrix(&mut r, 5, 4, 1.0);
    assert_eq!(ffn_block(&x, &w).unwrap(), x);
}

#[test]
fn ffn_commutes_with_row_permutation() {
    let mut r = rng(9);
    let w = random_layer(&mut r, 4, 8);
    let x = random_matrix(&mut r, 4, 4, 1.0);
    let perm = [2, 0, 3, 1];
    let px = Tensor::from_rows(&perm.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let y = ffn_block(&x, &w).unwrap();
    let py = ffn_block(&px, &w).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(py.row(k), y.row(i));
    }
}

#[test]
fn single_token_ffn_by_hand() {
    let mut w = zero_layer(2, 2);
    w.w_fc1 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, -1.0]).unwrap();
    w.b_fc1 = Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap();
    w.w_fc2 = Tensor::matrix(2, 2, vec![1.0, 1.0, -2.0, 0.5]).unwrap();
    let x = Tensor::from_rows(&[vec![3.0, 1.0]]).unwrap();
    let y = ffn_block(&x, &w).unwrap();
    let s = 1.0 / (1.0f64 + 1e-6).sqrt();
    let h = [s, -s];
    let a = [ref_gelu(h[0] - 0.5 * s + 0.1), ref_gelu(s + 0.2)];
    let expected = [3.0 + a[0] - 2.0 * a[1], 1.0 + a[0] + 0.5 * a[1]];
    for c in 0..2 {
        assert!((y.get(0, c) - expected[c]).abs() < 1e-12);
    }
}

#[test]
fn zero_blocks_are_identity() {
    let cfg = small_config();
    let mut p = ModelParams::init(&cfg, 3).unwrap();
    for l in &mut p.layers {
        *l = zero_layer(cfg.embed_dim, cfg.hidden_dim());
    }
    let img = random_image(&mut rng(10), &cfg);
    let out = vit_forward(&img, &p, &cfg, None, Mode::Inference).unwrap();
    assert_eq!(out.traces.last().unwrap().features, patch_embed(&img, &p.stem, &cfg).unwrap());
}

#[test]
fn forward_shapes_and_determinism() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 4).unwrap();
    let img = random_image(&mut rng(11), &cfg);
    let a = vit_forward(&img, &p, &cfg, None, Mode::Inference).unwrap();
    let b = vit_forward(&img, &p, &cfg, None, Mode::Inference).unwrap();
    assert_eq!(a.logits.len(), cfg.num_classes);
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.traces.len(), cfg.num_layers);
    for t in &a.traces {
        assert_eq!(t.features.rows(), cfg.num_tokens());
        assert!(t.attention.is_none());
    }
}

#[test]
fn full_keep_matches_plain_forward() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 5).unwrap();
    let sched = KeepSchedule::with_default_stages(1.0, cfg.num_layers).unwrap();
    let img = random_image(&mut rng(12), &cfg);
    let plain = vit_forward(&img, &p, &cfg, None, Mode::Inference).unwrap();
    for mode in [Mode::Inference, Mode::Finetune, Mode::HardPrune] {
        assert_eq!(vit_forward(&img, &p, &cfg, Some(&sched), mode).unwrap().logits, plain.logits);
    }
}

#[test]
fn mismatched_schedule_is_a_contract_error() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 5).unwrap();
    let sched = KeepSchedule::with_default_stages(0.5, cfg.num_layers + 1).unwrap();
    let img = random_image(&mut rng(12), &cfg);
    let err = vit_forward(&img, &p, &cfg, Some(&sched), Mode::Inference).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn finetune_traces_carry_stochastic_attention() {
    let cfg = small_config();
    let p = ModelParams::init(&cfg, 6).unwrap();
    let sched = KeepSchedule::with_default_stages(0.5, cfg.num_layers).unwrap();
    let img = random_image(&mut rng(13), &cfg);
    let out = vit_forward(&img, &p, &cfg, Some(&sched), Mode::Finetune).unwrap();
    for t in &out.traces {
        let a = t.attention.as_ref().unwrap();
        assert_eq!(a.num_tokens(), cfg.num_tokens());
        assert!(a.max_row_sum_error() < 1e-9);
    }
}
