//! Pure dense kernels. Every reduction runs in a fixed left-to-right order so
//! identical inputs give bit-identical outputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// LayerNorm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("{what} must be a matrix, got extents {:?}", t.dims())));
    }
    Ok(())
}

/// `out += a · b` for raw row-major buffers (`a` is m×p, `b` is p×n).
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * p..(i + 1) * p];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is m×p and `b` is n×p.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let b_row = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ · b` where `a` is p×m and `b` is p×n.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    for k in 0..p {
        let a_row = &a[k * m..(k + 1) * m];
        let b_row = &b[k * n..(k + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "left operand")?;
    require_matrix(b, "right operand")?;
    let (m, p) = (a.rows(), a.cols());
    let (p2, n) = (b.rows(), b.cols());
    if p != p2 {
        return Err(Error::shape(format!("matmul inner extents differ: {m}x{p} · {p2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, p, n);
    Tensor::matrix(m, n, out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_matrix(a, "operand")?;
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::matrix(n, m, out)
}

/// Softmax of one row of `x / scale`, written into `out`.
pub(crate) fn softmax_row(x: &[f64], scale: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / scale));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v / scale - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of `m / scale`, stabilized by per-row max subtraction.
pub fn row_softmax(m: &Tensor, scale: f64) -> Result<Tensor> {
    require_matrix(m, "softmax input")?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("softmax scale must be positive, got {scale}")));
    }
    if !m.is_finite() {
        return Err(Error::numeric("non-finite softmax input"));
    }
    let cols = m.cols();
    let mut out = vec![0.0; m.len()];
    for (src, dst) in m.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row(src, scale, dst);
    }
    Tensor::matrix(m.rows(), cols, out)
}

/// Normalizes one row; returns `(mean, 1/sqrt(var + eps))` for reuse by the adjoint.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = (v - mean) * inv_std * g + b;
    }
    (mean, inv_std)
}

/// LayerNorm of a single vector with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gamma.len() || x.len() != beta.len() || x.is_empty() {
        return Err(Error::shape(format!(
            "layer_norm extents differ: x {}, gamma {}, beta {}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, gamma, beta, eps, &mut out);
    Ok(out)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx of `x·Φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = m(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(matmul(&a, &Tensor::identity(3)).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_case() {
        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = m(&[vec![5.0], vec![6.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.25, 4.0]]);
        let b = m(&[vec![2.0, 1.0, -1.0], vec![0.0, 3.0, 5.0], vec![1.5, 1.0, 2.0]]);
        let mut nt = vec![0.0; 6];
        matmul_nt_acc(a.data(), b.data(), &mut nt, 2, 3, 3);
        assert_eq!(nt, matmul(&a, &transpose(&b).unwrap()).unwrap().into_data());
        let mut tn = vec![0.0; 9];
        matmul_tn_acc(a.data(), a.data(), &mut tn, 3, 2, 3);
        assert_eq!(tn, matmul(&transpose(&a).unwrap(), &a).unwrap().into_data());
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&m(&[vec![0.0, 0.0]]), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = row_softmax(&m(&[vec![0.0, 3f64.ln()]]), 1.0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
        let s = row_softmax(&m(&[vec![1000.0, 1000.0]]), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            row_softmax(&m(&[vec![f64::NAN, 0.0]]), 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(row_softmax(&m(&[vec![0.0]]), 0.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[2.0; 4], &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-300).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], -1.0, epsilon = 1e-12);
        let out = layer_norm(&[0.3, 7.0, -2.0], &[0.0; 3], &[0.5, -1.0, 2.0], LAYER_NORM_EPS).unwrap();
        assert_eq!(out, vec![0.5, -1.0, 2.0]);
        assert!(layer_norm(&[1.0], &[1.0, 1.0], &[0.0], 1e-6).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        // x·Φ(x) at 1 with Φ(1) = 0.841344746068543 (tabulated normal CDF).
        assert_abs_diff_eq!(gelu(1.0), 0.841344746068543, epsilon = 1e-12);
        assert!(gelu(-10.0).abs() < 1e-20);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad(x), fd, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            vals in prop::collection::vec(-50.0f64..50.0, 1..40),
            scale in 0.1f64..10.0,
        ) {
            let n = vals.len();
            let s = row_softmax(&Tensor::matrix(1, n, vals).unwrap(), scale).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn kernels_are_pure(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
            let a = Tensor::matrix(3, 4, vals.clone()).unwrap();
            let b = Tensor::matrix(4, 3, vals).unwrap();
            let first = matmul(&a, &b).unwrap();
            let second = matmul(&a, &b).unwrap();
            prop_assert_eq!(first.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            second.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
