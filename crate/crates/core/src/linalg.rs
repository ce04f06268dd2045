//! Small dense helpers for K x K matrices stored row-major in flat slices.
//!
//! Latent dimensions here are small (K <= ~30), so plain loops beat pulling a
//! general linear algebra crate into the per-observation hot path.

/// Lower Cholesky factor of a symmetric positive-definite matrix.
/// Returns `None` if a pivot is not strictly positive.
pub fn cholesky(a: &[f64], k: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), k * k);
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for m in 0..j {
                s -= l[i * k + m] * l[j * k + m];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Some(l)
}

/// `L * L^T` for lower-triangular `L`.
pub fn lower_gram(l: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = 0.0;
            for m in 0..=j {
                s += l[i * k + m] * l[j * k + m];
            }
            out[i * k + j] = s;
            out[j * k + i] = s;
        }
    }
    out
}

/// Inverse of a lower-triangular matrix with nonzero diagonal.
pub fn lower_inverse(l: &[f64], k: usize) -> Vec<f64> {
    let mut inv = vec![0.0; k * k];
    for col in 0..k {
        // forward solve L x = e_col; x is zero above `col`
        inv[col * k + col] = 1.0 / l[col * k + col];
        for i in (col + 1)..k {
            let mut s = 0.0;
            for m in col..i {
                s += l[i * k + m] * inv[m * k + col];
            }
            inv[i * k + col] = -s / l[i * k + i];
        }
    }
    inv
}

/// `M^T * M` for lower-triangular `M` (used for `Sigma^{-1} = L^{-T} L^{-1}`).
pub fn lower_transpose_gram(m: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = 0.0;
            // rows below max(i, j) = i contribute
            for r in i..k {
                s += m[r * k + i] * m[r * k + j];
            }
            out[i * k + j] = s;
            out[j * k + i] = s;
        }
    }
    out
}

/// `out = A x` for a dense K x K matrix.
#[inline]
pub fn mat_vec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * k..(i + 1) * k];
        *o = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

/// `out = M x` for lower-triangular `M`.
#[inline]
pub fn lower_mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * k..i * k + i + 1];
        *o = row.iter().zip(x).map(|(r, v)| r * v).sum();
    }
}

/// `out = M^T x` for lower-triangular `M`.
#[inline]
pub fn lower_transpose_mat_vec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let k = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in j..k {
            s += m[i * k + j] * x[i];
        }
        *o = s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-pmf of `y` under success logit `eta`.
#[inline]
pub fn bernoulli_logit_logpmf(y: u8, eta: f64) -> f64 {
    if y == 1 {
        -softplus(-eta)
    } else {
        -softplus(eta)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_round_trip() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        let back = lower_gram(&l, 3);
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lower_inverse_is_inverse() {
        let l = [2.0, 0.0, 0.0, 0.5, 1.5, 0.0, -0.3, 0.2, 0.7];
        let inv = lower_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|m| l[i * 3 + m] * inv[m * 3 + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((s - e).abs() < 1e-12);
            }
        }
        let prec = lower_transpose_gram(&inv, 3);
        let sigma = lower_gram(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|m| sigma[i * 3 + m] * prec[m * 3 + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((s - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_pd_rejected() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn softplus_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
