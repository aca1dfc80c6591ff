//! Low-level kernels shared by the layers: GEMM, patch extraction and
//! elementwise activations. Everything is single-threaded and accumulates in a
//! fixed order, so results are bit-reproducible run to run.

/// `C = beta * C + op(A) · op(B)` on row-major buffers, where `op(A)` is
/// `m × k` and `op(B)` is `k × n`. With `trans_a` the buffer `a` holds the
/// `k × m` matrix (likewise `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given strides lies inside the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a 2-D sliding window over an NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }
}

/// Extracts patches into a `[n·ho·wo, k·k·c]` matrix ordered `(ky, kx, channel)`.
pub(crate) fn im2col(
    x: &[f32],
    dims: (usize, usize, usize, usize),
    win: Window,
) -> (Vec<f32>, usize, usize) {
    let (n, h, w, c) = dims;
    let ho = win.output_size(h);
    let wo = win.output_size(w);
    let k = win.kernel;
    let row_len = k * k * c;
    let mut col = vec![0.0f32; n * ho * wo * row_len];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut col[((b * ho + oy) * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(
    col: &[f32],
    dims: (usize, usize, usize, usize),
    win: Window,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let (n, h, w, c) = dims;
    let k = win.kernel;
    let row_len = k * k * c;
    let mut dx = vec![0.0f32; n * h * w * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &col[((b * ho + oy) * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        for (d, &g) in dx[dst..dst + c]
                            .iter_mut()
                            .zip(&row[(ky * k + kx) * c..][..c])
                        {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[cout, cin, k, k]` (PyTorch kernel layout) → `[cout, k, k, cin]`.
pub(crate) fn kernel_to_channels_last(w: &[f32], cout: usize, cin: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0; w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for t in 0..k * k {
                out[(o * k * k + t) * cin + i] = w[(o * cin + i) * k * k + t];
            }
        }
    }
    out
}

/// Inverse of [`kernel_to_channels_last`], accumulated into `dst`.
pub(crate) fn accumulate_kernel_from_channels_last(
    src: &[f32],
    dst: &mut [f32],
    cout: usize,
    cin: usize,
    k: usize,
) {
    for o in 0..cout {
        for i in 0..cin {
            for t in 0..k * k {
                dst[(o * cin + i) * k * k + t] += src[(o * k * k + t) * cin + i];
            }
        }
    }
}

/// Sums the rows of a `[rows, c]` matrix into `acc`.
pub(crate) fn accumulate_column_sums(m: &[f32], c: usize, acc: &mut [f32]) {
    for row in m.chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

const FRAC_1_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

/// Exact (erf-based) GELU.
#[inline]
pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    0.5 * (1.0 + libm::erff(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
            }
        }
        c
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_combinations() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|v| (v as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![1.0; m * n];
            gemm(
                m,
                k,
                n,
                if ta { &at } else { &a },
                ta,
                if tb { &bt } else { &b },
                tb,
                &mut c,
                0.0,
            );
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dims = (2, 5, 6, 3);
        let win = Window {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..2 * 5 * 6 * 3)
            .map(|v| ((v * 7 % 13) as f32) - 6.0)
            .collect();
        let (col, ho, wo) = im2col(&x, dims, win);
        let y: Vec<f32> = (0..col.len())
            .map(|v| ((v * 5 % 11) as f32) - 5.0)
            .collect();
        let lhs: f64 = col
            .iter()
            .zip(&y)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let back = col2im(&y, dims, win, ho, wo);
        let rhs: f64 = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn kernel_layout_roundtrip() {
        let w: Vec<f32> = (0..4 * 3 * 2 * 2).map(|v| v as f32).collect();
        let cl = kernel_to_channels_last(&w, 4, 3, 2);
        let mut back = vec![0.0; w.len()];
        accumulate_kernel_from_channels_last(&cl, &mut back, 4, 3, 2);
        assert_eq!(back, w);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for &x in &[-4.0f32, -1.3, -0.2, 0.0, 0.7, 2.5] {
            let h = 1e-2;
            let fd_gelu = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let fd_silu = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd_gelu - gelu_grad(x)).abs() < 1e-3, "gelu at {x}");
            assert!((fd_silu - silu_grad(x)).abs() < 1e-3, "silu at {x}");
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-100.0) >= 0.0 && sigmoid(100.0) <= 1.0);
    }
}
