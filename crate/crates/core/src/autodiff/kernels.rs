//! Raw numeric kernels shared by graph ops and quantized layers.

/// `C = alpha * op(A) * op(B) + beta * C` for row-major buffers.
///
/// `op(A)` is `m x k`; when `a_t` is set, `a` is stored as `k x m`.
/// Likewise `op(B)` is `k x n`, stored as `n x k` when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A buffer");
    assert_eq!(b.len(), k * n, "gemm: B buffer");
    assert_eq!(c.len(), m * n, "gemm: C buffer");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Returns `op(A) * op(B)` as a fresh `m x n` buffer.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, a_t, b, b_t, 0.0, &mut c);
    c
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) * (x + 0.044715 x^3))`, the inner term of tanh-GELU.
#[inline]
pub fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

#[inline]
pub fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

/// Row-wise softmax in place over rows of length `cols`.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Column sums of a `rows x cols` buffer.
pub fn col_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
