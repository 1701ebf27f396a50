//! Slice-level kernels shared by the layers. Shapes are trusted here; the
//! tensor-level wrappers in `ops` do the checking.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `ta` set, `a` is stored as `k × m`; with `tb` set, `b` is stored as
/// `n × k`. `c` is always `m × n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above guarantees every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Copies columns `[offset, offset + width)` of a row-major `rows × stride`
/// matrix into a contiguous `rows × width` buffer.
pub fn take_cols(src: &[f64], rows: usize, stride: usize, offset: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&src[r * stride + offset..r * stride + offset + width]);
    }
    out
}

pub fn put_cols(dst: &mut [f64], rows: usize, stride: usize, offset: usize, src: &[f64]) {
    let width = src.len() / rows.max(1);
    for r in 0..rows {
        dst[r * stride + offset..r * stride + offset + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Column sums of a `rows × cols` matrix added into `dst`.
pub fn add_col_sums(dst: &mut [f64], src: &[f64], cols: usize) {
    for row in src.chunks_exact(cols) {
        add_into(dst, row);
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta, bb, tb) in [
            (&a, false, &b, false),
            (&at, true, &b, false),
            (&a, false, &bt, true),
            (&at, true, &bt, true),
        ] {
            let mut c = vec![f64::NAN; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut c = want.clone();
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_with_empty_inner_dimension_zeroes_output() {
        let mut c = vec![3.0; 4];
        gemm(2, 0, 2, &[], false, &[], false, &mut c, false);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
