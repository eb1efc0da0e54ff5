//! Fixed numeric op set with hand-written backward passes.
//!
//! Every op is deterministic: the accumulation order of each output element
//! is fixed and independent of the worker count, so identical inputs give
//! bit-identical outputs. Row-parallel dispatch via rayon only splits work
//! across independent output rows.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use rayon::prelude::*;

/// Below this many output elements a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 14;

fn want_parallel(work: usize) -> bool {
    work >= PAR_THRESHOLD && rayon::current_num_threads() > 1
}

/// C = A @ B for A [m×k], B [k×n].
///
/// ikj loop order: the inner update walks contiguous rows of B and C.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(&[m, n]);
    let bd = b.data();
    let kernel = |i: usize, out: &mut [E]| {
        let ar = a.row(i);
        for t in 0..k {
            let av = ar[t];
            let br = &bd[t * n..(t + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if want_parallel(m * n * k) {
        c.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out)| kernel(i, out));
    } else {
        for (i, out) in c.data_mut().chunks_mut(n).enumerate() {
            kernel(i, out);
        }
    }
    Ok(c)
}

/// C = A @ B^T for A [m×k], B [n×k].
///
/// Transposes B once (O(nk)) and reuses the streaming ikj kernel, which is
/// several times faster than a row-dot kernel at these shapes.
pub fn matmul_nt<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            detail: format!("{:?} x {:?}^T", a.shape(), b.shape()),
        });
    }
    matmul(a, &transpose2d(b))
}

/// Transpose of a 2-D tensor.
pub fn transpose2d<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[n, m]);
    let od = out.data_mut();
    for i in 0..m {
        let row = x.row(i);
        for (j, &v) in row.iter().enumerate() {
            od[j * m + i] = v;
        }
    }
    out
}

/// C = A^T @ B for A [k×m], B [k×n]; accumulates rank-1 updates row by row.
pub fn matmul_tn<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            detail: format!("{:?}^T x {:?}", a.shape(), b.shape()),
        });
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Tensor::zeros(&[m, n]);
    let cd = c.data_mut();
    for t in 0..k {
        let ar = a.row(t);
        let br = b.row(t);
        for i in 0..m {
            let av = ar[i];
            let out = &mut cd[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(c)
}

/// Dot product with a fixed 8-lane accumulation order (vectorizable without
/// changing results between runs).
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let ar = &a[c * LANES..(c + 1) * LANES];
        let br = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += ar[l] * br[l];
        }
    }
    let mut tail = E::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    // fixed tree reduction
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows",
            detail: format!("{:?}", x.shape()),
        });
    }
    let mut out = x.clone();
    let n = x.cols();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row)?;
    }
    Ok(out)
}

/// Stable softmax of a slice, in place. Errors on non-finite input.
pub(crate) fn softmax_in_place<E: Element>(row: &mut [E]) -> Result<()> {
    let mut max = row[0];
    for &v in row.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "softmax input".to_string(),
            });
        }
        if v > max {
            max = v;
        }
    }
    let mut sum = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = E::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Backward of row-wise softmax: given probabilities `p` and upstream `dy`,
/// dx_i = p_i * (dy_i - sum_j dy_j p_j) per row.
pub(crate) fn softmax_rows_backward<E: Element>(probs: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(probs.shape(), dy.shape());
    let n = probs.cols();
    let mut dx = Tensor::zeros(probs.shape());
    for ((px, dyx), dxx) in probs
        .data()
        .chunks(n)
        .zip(dy.data().chunks(n))
        .zip(dx.data_mut().chunks_mut(n))
    {
        let inner = dot(dyx, px);
        for i in 0..n {
            dxx[i] = px[i] * (dyx[i] - inner);
        }
    }
    dx
}

/// out[i] = gain[i] * x[i] / sqrt(mean(x^2) + eps), for 1-D x and gain.
pub fn rmsnorm<E: Element>(x: &Tensor<E>, gain: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    if x.shape().len() != 1 || x.shape() != gain.shape() {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            detail: format!("x {:?}, gain {:?}", x.shape(), gain.shape()),
        });
    }
    if x.numel() == 0 || eps < 0.0 {
        return Err(Error::InvalidConfig("rmsnorm needs n >= 1 and eps >= 0".into()));
    }
    let mut out = Tensor::zeros(x.shape());
    rmsnorm_row(x.data(), gain.data(), E::from_f64(eps), out.data_mut());
    Ok(out)
}

/// One row of rmsnorm; returns 1/rms for reuse in the backward pass.
pub(crate) fn rmsnorm_row<E: Element>(x: &[E], gain: &[E], eps: E, out: &mut [E]) -> E {
    let n = x.len();
    let ms = dot(x, x) / E::from_f64(n as f64);
    let inv = E::one() / (ms + eps).sqrt();
    for i in 0..n {
        out[i] = gain[i] * x[i] * inv;
    }
    inv
}

/// Backward of one rmsnorm row.
///
/// dx_i = g_i dy_i * inv - x_i * inv^3 / n * sum_j(dy_j g_j x_j);
/// dgain_i += dy_i x_i inv.
pub(crate) fn rmsnorm_row_backward<E: Element>(
    x: &[E],
    gain: &[E],
    inv: E,
    dy: &[E],
    dx: &mut [E],
    dgain: &mut [E],
) {
    let n = x.len();
    let mut inner = E::zero();
    for j in 0..n {
        inner += dy[j] * gain[j] * x[j];
    }
    let coef = inner * inv * inv * inv / E::from_f64(n as f64);
    for i in 0..n {
        dx[i] = gain[i] * dy[i] * inv - x[i] * coef;
        dgain[i] += dy[i] * x[i] * inv;
    }
}

/// Mean cross-entropy over positions: mean_t( -log softmax(logits[t])[targets[t]] ).
pub fn cross_entropy_mean<E: Element>(logits: &Tensor<E>, targets: &[u16]) -> Result<f64> {
    Ok(cross_entropy_mean_with_grad(logits, targets, false)?.0)
}

/// Cross-entropy loss and, when `with_grad`, dL/dlogits = (softmax - onehot)/T.
pub(crate) fn cross_entropy_mean_with_grad<E: Element>(
    logits: &Tensor<E>,
    targets: &[u16],
    with_grad: bool,
) -> Result<(f64, Option<Tensor<E>>)> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_mean",
            detail: format!("logits {:?}, {} targets", logits.shape(), targets.len()),
        });
    }
    let (t_len, vocab) = (logits.rows(), logits.cols());
    for &t in targets {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                id: t as usize,
                vocab,
            });
        }
    }
    let inv_t = E::one() / E::from_f64(t_len as f64);
    let mut grad = if with_grad {
        Some(Tensor::<E>::zeros(logits.shape()))
    } else {
        None
    };
    let mut loss = 0.0f64;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::zero();
        if let Some(g) = grad.as_mut() {
            let grow = g.row_mut(i);
            for (gv, &v) in grow.iter_mut().zip(row) {
                *gv = (v - max).exp();
                sum += *gv;
            }
            let inv_sum = E::one() / sum;
            for gv in grow.iter_mut() {
                *gv *= inv_sum * inv_t;
            }
            grow[target as usize] -= inv_t;
        } else {
            for &v in row {
                sum += (v - max).exp();
            }
        }
        let lse = max.to_f64() + sum.to_f64().ln();
        loss += lse - row[target as usize].to_f64();
    }
    loss /= t_len as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross_entropy_mean".to_string(),
        });
    }
    Ok((loss, grad))
}

/// Central-difference gradient check.
///
/// Perturbs each parameter by ±h and compares (f(θ+h)-f(θ-h))/2h against
/// the supplied analytic gradient element by element. Returns the largest
/// difference relative to the numeric gradient's magnitude:
/// max_i |analytic_i - numeric_i| / max(|numeric|_inf, 1e-8).
///
/// The floor only matters for all-zero gradients; a per-element denominator
/// would instead measure finite-difference rounding noise on near-zero
/// entries (the fp-fm cancellation leaves ~ulp-level noise that dwarfs any
/// entry below ~1e-8 regardless of h). Double precision only.
pub fn finite_diff_gradcheck<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig("gradcheck step h must be > 0".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_gradcheck",
            detail: format!("{} params vs {} gradients", params.len(), analytic.len()),
        });
    }
    let mut theta = params.to_vec();
    let mut max_abs_diff = 0.0f64;
    let mut max_numeric = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = f(&theta)?;
        theta[i] = orig - h;
        let fm = f(&theta)?;
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: "gradcheck objective".to_string(),
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        max_abs_diff = max_abs_diff.max((analytic[i] - numeric).abs());
        max_numeric = max_numeric.max(numeric.abs());
    }
    Ok(max_abs_diff / max_numeric.max(1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_hand_dot_product() {
        // [[1,2]] @ [[3],[4]] = [[11]]
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0], vec![4.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_zero_row_gives_zero_row() {
        let a = t2(&[vec![0.0, 0.0], vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![1.0, 2.0]]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        // nt and tn against the plain kernel on random-ish values
        let a = Tensor::<f64>::from_vec(&[3, 5], (0..15).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap();
        let b = Tensor::<f64>::from_vec(&[5, 4], (0..20).map(|i| (i as f64) * 0.11 + 0.5).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();

        // b_t is [4x5]; a @ b == a @ (b_t)^T
        let mut bt = Tensor::<f64>::zeros(&[4, 5]);
        for i in 0..5 {
            for j in 0..4 {
                bt.data_mut()[j * 5 + i] = b.at(i, j);
            }
        }
        let c_nt = matmul_nt(&a, &bt).unwrap();
        for (x, y) in c.data().iter().zip(c_nt.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a_t is [5x3]; (a_t)^T @ b == a @ b
        let mut at = Tensor::<f64>::zeros(&[5, 3]);
        for i in 0..3 {
            for j in 0..5 {
                at.data_mut()[j * 3 + i] = a.at(i, j);
            }
        }
        let c_tn = matmul_tn(&at, &b).unwrap();
        for (x, y) in c.data().iter().zip(c_tn.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_deterministic() {
        let a = Tensor::<f32>::from_vec(&[17, 33], (0..561).map(|i| (i as f32).sin()).collect()).unwrap();
        let b = Tensor::<f32>::from_vec(&[33, 29], (0..957).map(|i| (i as f32).cos()).collect()).unwrap();
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let x = t2(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]);
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        // row [0, ln 3] -> [0.25, 0.75]
        let x = t2(&[vec![0.0, 3.0f64.ln()]]);
        let s = softmax_rows(&x).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::<f64>::from_vec(&[7, 13], (0..91).map(|i| ((i * 37) % 17) as f64 - 8.0).collect()).unwrap();
        let s = softmax_rows(&x).unwrap();
        for row in s.data().chunks(13) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_constant_input() {
        let x = Tensor::<f64>::filled(&[5], 3.7);
        let g = Tensor::<f64>::filled(&[5], 1.0);
        let y = rmsnorm(&x, &g, 1e-12).unwrap();
        for &v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_hand_case() {
        // x=[3,4], gain=1, eps=0 -> [3,4]/sqrt(12.5)
        let x = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let g = Tensor::<f64>::filled(&[2], 1.0);
        let y = rmsnorm(&x, &g, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / r).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_zero_gain() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]);
        let y = rmsnorm(&x, &g, 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let v = 256;
        let logits = Tensor::<f64>::zeros(&[3, v]);
        let loss = cross_entropy_mean(&logits, &[0, 17, 255]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.data_mut()[2] = 50.0;
        let loss = cross_entropy_mean(&logits, &[2]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_closed_form() {
        // logits [[0, ln 3]], target 1 -> -ln 0.75
        let logits = Tensor::<f64>::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let loss = cross_entropy_mean(&logits, &[1]).unwrap();
        assert!((loss + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        assert!(matches!(
            cross_entropy_mean(&logits, &[4]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_grad_matches_probs() {
        let logits = Tensor::<f64>::from_vec(&[1, 3], vec![0.1, -0.7, 1.3]).unwrap();
        let (loss, grad) = cross_entropy_mean_with_grad(&logits, &[2], true).unwrap();
        let check = finite_diff_gradcheck(
            |p| cross_entropy_mean(&Tensor::from_vec(&[1, 3], p.to_vec()).unwrap(), &[2]),
            logits.data(),
            grad.unwrap().data(),
            1e-5,
        )
        .unwrap();
        assert!(check < 1e-8, "rel err {check}, loss {loss}");
    }

    #[test]
    fn gradcheck_quadratic_exact() {
        let theta = vec![0.3, -1.2, 2.5, 0.0];
        let f = |p: &[f64]| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>());
        let analytic = theta.clone();
        let err = finite_diff_gradcheck(f, &theta, &analytic, 1e-4).unwrap();
        assert!(err <= 1e-9, "err {err}");
    }

    #[test]
    fn gradcheck_constant_function() {
        let theta = vec![1.0, 2.0];
        let err = finite_diff_gradcheck(|_| Ok(4.2), &theta, &[0.0, 0.0], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.0, -0.5]).unwrap();
        // scalar objective: weighted sum of softmax outputs
        let w: Vec<f64> = (0..6).map(|i| 0.31 * i as f64 - 0.8).collect();
        let obj = |p: &[f64]| {
            let s = softmax_rows(&Tensor::from_vec(&[2, 3], p.to_vec()).unwrap()).unwrap();
            Ok(s.data().iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let probs = softmax_rows(&x).unwrap();
        let dy = Tensor::from_vec(&[2, 3], w.clone()).unwrap();
        let dx = softmax_rows_backward(&probs, &dy);
        let err = finite_diff_gradcheck(obj, x.data(), dx.data(), 1e-6).unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn rmsnorm_backward_matches_fd() {
        let n = 5;
        let x: Vec<f64> = (0..n).map(|i| 0.7 * i as f64 - 1.3).collect();
        let g: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let w: Vec<f64> = (0..n).map(|i| 0.2 * i as f64 - 0.4).collect();
        let eps = 1e-5;

        // d/dx of sum_i w_i * rmsnorm(x, g)_i
        let obj_x = |p: &[f64]| {
            let y = rmsnorm(
                &Tensor::from_vec(&[n], p.to_vec()).unwrap(),
                &Tensor::from_vec(&[n], g.clone()).unwrap(),
                eps,
            )
            .unwrap();
            Ok(y.data().iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let mut out = vec![0.0; n];
        let inv = rmsnorm_row(&x, &g, eps, &mut out);
        let mut dx = vec![0.0; n];
        let mut dg = vec![0.0; n];
        rmsnorm_row_backward(&x, &g, inv, &w, &mut dx, &mut dg);
        let err = finite_diff_gradcheck(obj_x, &x, &dx, 1e-6).unwrap();
        assert!(err < 1e-7, "dx err {err}");

        let obj_g = |p: &[f64]| {
            let y = rmsnorm(
                &Tensor::from_vec(&[n], x.clone()).unwrap(),
                &Tensor::from_vec(&[n], p.to_vec()).unwrap(),
                eps,
            )
            .unwrap();
            Ok(y.data().iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let err_g = finite_diff_gradcheck(obj_g, &g, &dg, 1e-6).unwrap();
        assert!(err_g < 1e-7, "dg err {err_g}");
    }
}
