//! Shared fixtures and naive reference implementations for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokidle_core::vit::{LayerParams, ModelParams, ViTConfig};
use tokidle_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, config: &ViTConfig) -> Tensor {
    let s = config.image_size;
    let c = config.channels_in;
    Tensor::new(vec![s, s, c], (0..s * s * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Layer with every tensor zero except LayerNorm scales.
pub fn zero_layer(c: usize, hidden: usize) -> LayerParams {
    let z = |r: usize, k: usize| Tensor::zeros(&[r, k]);
    LayerParams {
        norm1_gamma: Tensor::filled(&[1, c], 1.0),
        norm1_beta: z(1, c),
        w_q: z(c, c),
        b_q: z(1, c),
        w_k: z(c, c),
        b_k: z(1, c),
        w_v: z(c, c),
        b_v: z(1, c),
        w_o: z(c, c),
        b_o: z(1, c),
        norm2_gamma: Tensor::filled(&[1, c], 1.0),
        norm2_beta: z(1, c),
        w_fc1: z(c, hidden),
        b_fc1: z(1, hidden),
        w_fc2: z(hidden, c),
        b_fc2: z(1, c),
    }
}

pub fn random_layer(rng: &mut ChaCha8Rng, c: usize, hidden: usize) -> LayerParams {
    let mut w = zero_layer(c, hidden);
    for (_, t) in w.named_mut() {
        let dims = t.dims().to_vec();
        let scale = 1.0 / (dims[0] as f64).sqrt();
        *t = random_matrix(rng, dims[0], dims[1], scale);
    }
    w
}

pub fn small_config() -> ViTConfig {
    ViTConfig { image_size: 16, patch_size: 4, channels_in: 1, embed_dim: 8, num_heads: 2, num_layers: 4, ffn_ratio: 2, num_classes: 3 }
}

pub fn random_params(config: &ViTConfig, seed: u64) -> ModelParams {
    ModelParams::init(config, seed).unwrap()
}

// ---- naive references -------------------------------------------------------

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Rows {
    t.to_rows()
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn ref_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

pub fn ref_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    (0..cols)
        .map(|j| (0..rows).map(|i| x[i] * w.get(i, j)).sum::<f64>() + b.data()[j])
        .collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn ref_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Returns the attention output (with residual) and per-head attention.
pub fn ref_mhsa(x: &Rows, w: &LayerParams, heads: usize) -> (Rows, Vec<Rows>) {
    let n = x.len();
    let c = x[0].len();
    let d = c / heads;
    let g = vec_of(&w.norm1_gamma);
    let bt = vec_of(&w.norm1_beta);
    let h: Rows = x.iter().map(|r| ref_layer_norm(r, &g, &bt)).collect();
    let q: Rows = h.iter().map(|r| ref_linear(r, &w.w_q, &w.b_q)).collect();
    let k: Rows = h.iter().map(|r| ref_linear(r, &w.w_k, &w.b_k)).collect();
    let v: Rows = h.iter().map(|r| ref_linear(r, &w.w_v, &w.b_v)).collect();
    let mut concat = vec![vec![0.0; c]; n];
    let mut maps = Vec::new();
    for hd in 0..heads {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| q[i][hd * d + t] * k[j][hd * d + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            a[i] = ref_softmax(&logits);
            for t in 0..d {
                concat[i][hd * d + t] = (0..n).map(|j| a[i][j] * v[j][hd * d + t]).sum();
            }
        }
        maps.push(a);
    }
    let out = x
        .iter()
        .zip(&concat)
        .map(|(xi, ci)| ref_linear(ci, &w.w_o, &w.b_o).iter().zip(xi).map(|(p, r)| p + r).collect())
        .collect();
    (out, maps)
}

pub fn ref_ffn(x: &Rows, w: &LayerParams) -> Rows {
    let g = vec_of(&w.norm2_gamma);
    let bt = vec_of(&w.norm2_beta);
    x.iter()
        .map(|r| {
            let h = ref_layer_norm(r, &g, &bt);
            let a: Vec<f64> = ref_linear(&h, &w.w_fc1, &w.b_fc1).into_iter().map(ref_gelu).collect();
            ref_linear(&a, &w.w_fc2, &w.b_fc2).iter().zip(r).map(|(p, q)| p + q).collect()
        })
        .collect()
}

pub fn ref_block(x: &Rows, w: &LayerParams, heads: usize) -> (Rows, Vec<Rows>) {
    let (y, a) = ref_mhsa(x, w, heads);
    (ref_ffn(&y, w), a)
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- brute-force cut quantities on a plain matrix ---------------------------

pub fn bf_cut(a: &Rows, s: &[usize], i: &[usize]) -> f64 {
    let mut t = 0.0;
    for &p in s {
        for &q in i {
            t += a[p][q];
        }
    }
    t
}

pub fn bf_inter(a: &Rows, s: &[usize], i: &[usize]) -> f64 {
    if i.is_empty() {
        return 0.0;
    }
    let k = s.len() as f64;
    let n = a.len() as f64;
    let mut first = 0.0;
    for &p in s {
        let mut r = 0.0;
        for &q in i {
            r += a[p][q];
        }
        first += r * r;
    }
    let mut second = 0.0;
    for &p in i {
        let mut r = 0.0;
        for &q in s {
            if q != 0 {
                r += a[p][q];
            }
        }
        second += r * r;
    }
    first / k + second / (n - k)
}

pub fn bf_intra(a: &Rows, s: &[usize], i: &[usize]) -> f64 {
    if i.is_empty() {
        return 0.0;
    }
    let k = s.len() as f64;
    let mut t = 0.0;
    for &p in s {
        let mut r = 0.0;
        for &q in s {
            r += a[p][q];
        }
        t += (1.0 - r) * (1.0 - r);
    }
    t / k
}

pub fn bf_assoc(a: &Rows, s: &[usize]) -> f64 {
    let all: Vec<usize> = (0..a[0].len()).collect();
    bf_cut(a, s, &all)
}

pub fn bf_ncut(a: &Rows, s: &[usize], i: &[usize]) -> f64 {
    if i.is_empty() {
        return 0.0;
    }
    let s_img: Vec<usize> = s.iter().copied().filter(|&t| t != 0).collect();
    bf_cut(a, s, i) / bf_assoc(a, s) + bf_cut(a, i, &s_img) / bf_assoc(a, i)
}
