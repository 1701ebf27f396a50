//! Differentiable primitives with hand-written backward passes.
//!
//! Every forward has a matching `*_backward` that returns the gradient with
//! respect to the inputs and accumulates parameter gradients where the
//! primitive owns parameters.

use super::kernels::{add_col_sums, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-7;

// ---------------------------------------------------------------- affine

pub fn affine_rows(x: &[f64], rows: usize, w: &[f64], d_in: usize, d_out: usize, b: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, d_in, d_out, x, false, w, false, &mut y, true);
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn affine_rows_backward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    d_in: usize,
    d_out: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    gemm(d_in, rows, d_out, x, true, dy, false, dw, true);
    add_col_sums(db, dy, d_out);
    let mut dx = vec![0.0; rows * d_in];
    gemm(rows, d_out, d_in, dy, false, w, true, &mut dx, false);
    dx
}

/// `y = xW + b` over the last axis of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d_in, d_out) = check_affine(x, w, b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::from_vec(&shape, affine_rows(x.data(), x.rows(), w.data(), d_in, d_out, b.data()))
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn affine_backward(x: &Tensor, w: &Tensor, b: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    let (d_in, d_out) = check_affine(x, w, b)?;
    if dy.rows() != x.rows() || dy.cols() != d_out {
        return Err(Error::Shape(format!(
            "affine upstream gradient {:?} vs input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(b.shape());
    let dx = affine_rows_backward(
        x.data(),
        x.rows(),
        w.data(),
        d_in,
        d_out,
        dy.data(),
        dw.data_mut(),
        db.data_mut(),
    );
    Ok(AffineGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dw,
        db,
    })
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if w.shape().len() != 2 || x.shape().is_empty() || x.cols() != w.shape()[0] || b.len() != w.shape()[1] {
        return Err(Error::Shape(format!(
            "affine input {:?} against weight {:?} and bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok((w.shape()[0], w.shape()[1]))
}

// ---------------------------------------------------------------- softmax

/// In-place masked softmax of one row. Masked entries become exactly 0; a
/// fully masked row becomes all zeros.
pub fn softmax_row_masked(row: &mut [f64], mask: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in row.iter().zip(mask) {
        if m && *v > max {
            max = *v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of a softmax row given its output `y` and upstream `dy`.
pub fn softmax_row_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (dyi - dot);
    }
}

pub fn softmax_rows(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != logits.len() {
        return Err(Error::Shape(format!(
            "softmax logits {:?} with mask of {} entries",
            logits.shape(),
            mask.len()
        )));
    }
    let n = logits.cols();
    let mut out = logits.clone();
    for (row, m) in out.data_mut().chunks_mut(n).zip(mask.chunks(n)) {
        softmax_row_masked(row, m);
    }
    Ok(out)
}

pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::Shape(format!(
            "softmax backward {:?} vs {:?}",
            y.shape(),
            dy.shape()
        )));
    }
    let n = y.cols();
    let mut dx = Tensor::zeros(y.shape());
    for ((d, yr), dyr) in dx
        .data_mut()
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(dy.data().chunks(n))
    {
        softmax_row_backward(yr, dyr, d);
    }
    Ok(dx)
}

// ---------------------------------------------------------------- layer norm

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_rows(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let n = (xr[c] - mean) * inv;
            normalized[r * d + c] = n;
            out[r * d + c] = gain[c] * n + bias[c];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

pub fn layer_norm_rows_backward(
    cache: &LayerNormCache,
    d: usize,
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let mut dn = vec![0.0; d];
    for (r, &inv) in cache.inv_std.iter().enumerate() {
        let n = &cache.normalized[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut sum_dn = 0.0;
        let mut sum_dn_n = 0.0;
        for c in 0..d {
            dgain[c] += g[c] * n[c];
            dbias[c] += g[c];
            dn[c] = g[c] * gain[c];
            sum_dn += dn[c];
            sum_dn_n += dn[c] * n[c];
        }
        let scale = inv / d as f64;
        for c in 0..d {
            dx[r * d + c] = scale * (d as f64 * dn[c] - sum_dn - n[c] * sum_dn_n);
        }
    }
    dx
}

/// Normalizes each last-axis vector to mean 0 and variance 1, then applies
/// `gain * · + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(Error::Shape(format!(
            "layer norm input {:?} with gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let (out, cache) = layer_norm_rows(x.data(), d, gain.data(), bias.data());
    Ok((Tensor::from_vec(x.shape(), out)?, cache))
}

// ---------------------------------------------------------------- loss

/// Masked mean binary cross-entropy. Returns the loss and `∂loss/∂p`.
///
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the returned gradient is
/// the gradient of the clamped loss (zero where the clamp is active).
pub fn bce_loss(p: &[f64], y: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() || p.len() != mask.len() {
        return Err(Error::Shape(format!(
            "bce over {} probabilities, {} labels, {} mask entries",
            p.len(),
            y.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; p.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut total = 0.0;
    for i in 0..p.len() {
        if !mask[i] {
            continue;
        }
        let pc = p[i].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= y[i] * pc.ln() + (1.0 - y[i]) * (1.0 - pc).ln();
        if pc == p[i] {
            grad[i] = -(y[i] / pc - (1.0 - y[i]) / (1.0 - pc)) / n;
        }
    }
    Ok((total / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = affine(&t(&[1, 2], &[1.0, 0.0]), &eye, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
        let y = affine(&t(&[2], &[1.0, 2.0]), &t(&[2, 1], &[1.0, 1.0]), &t(&[1], &[0.5])).unwrap();
        assert_eq!(y.data(), &[3.5]);
        assert_eq!(y.shape(), &[1]);
    }

    #[test]
    fn affine_bias_gradient_of_sum_is_ones() {
        let x = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let b = t(&[2], &[0.0, 0.0]);
        let g = affine_backward(&x, &w, &b, &Tensor::filled(&[3, 2], 1.0)).unwrap();
        // One unit per row of x.
        assert_eq!(g.db.data(), &[3.0, 3.0]);
        let g1 = affine_backward(&t(&[1, 2], x.row(0)), &w, &b, &Tensor::filled(&[1, 2], 1.0)).unwrap();
        assert_eq!(g1.db.data(), &[1.0, 1.0]);
    }

    #[test]
    fn affine_rejects_mismatched_shapes() {
        let err = affine(&t(&[1, 3], &[0.0; 3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[2], &[0.0, 0.0]), &[true, true]).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[2], &[0.0, -1.0]), &[true, true]).unwrap();
        assert!((y.data()[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((y.data()[1] - 0.2689414213699951).abs() < 1e-12);
        let y = softmax_rows(&t(&[2], &[3.0, -7.0]), &[false, false]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let y = softmax_rows(&t(&[3], &[100.0, 1.0, 2.0]), &[false, true, true]).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] + y.data()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::filled(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let (y, _) = layer_norm(&t(&[3], &[1.0, 1.0, 1.0]), &one, &zero).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let (y, _) = layer_norm(&t(&[2], &[1.0, -1.0]), &Tensor::filled(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);

        let bias = t(&[3], &[0.5, -2.0, 7.0]);
        let (y, _) = layer_norm(&t(&[3], &[4.0, -1.0, 9.0]), &zero, &bias).unwrap();
        assert_eq!(y.data(), bias.data());
    }

    #[test]
    fn bce_examples() {
        let (l, _) = bce_loss(&[0.5], &[1.0], &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, _) = bce_loss(&[0.9, 0.1], &[1.0, 0.0], &[true, true]).unwrap();
        assert!((l - (-(0.9f64.ln()))).abs() < 1e-12);
        assert!((l - 0.1054).abs() < 1e-4);
        let (l, g) = bce_loss(&[0.3, 0.8], &[1.0, 0.0], &[false, false]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn bce_is_finite_at_hard_zero_and_one() {
        let (l, g) = bce_loss(&[0.0, 1.0], &[1.0, 0.0], &[true, true]).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }
}
