//! Raw FP32 kernels behind the autograd ops. Everything here works on flat
//! row-major slices; shape checking happens one layer up.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` where `a` is stored `k×m`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` where `b` is stored `n×k`.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfold one image `[C,H,W]` into `[C·K·K, Ho·Wo]`.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + u) as isize - g.padding as isize;
                    let dst_row = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (x, d) in dst_row.iter_mut().enumerate() {
                        let ix = (x * g.stride + v) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C,H,W]`.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for u in 0..k {
            for v in 0..k {
                let row = (c * k + u) * k + v;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride + u) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for x in 0..ow {
                        let ix = (x * g.stride + v) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation. `input` is `[N,C,H,W]`, `kernel` `[O,C,K,K]`.
pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[f32],
    kernel: &[f32],
) -> Vec<f32> {
    let in_len = g.channels * g.height * g.width;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut out = vec![0.0; batch * out_channels * cols_n];
    for n in 0..batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * out_channels * cols_n..(n + 1) * out_channels * cols_n];
        gemm_nn(out_channels, rows, cols_n, kernel, &cols, dst);
    }
    out
}

/// Gradients of [`conv2d_forward`]; either side may be skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    out_channels: usize,
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    mut grad_input: Option<&mut [f32]>,
    mut grad_kernel: Option<&mut [f32]>,
) {
    let in_len = g.channels * g.height * g.width;
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut dcols = vec![0.0; rows * cols_n];
    for n in 0..batch {
        let dout = &grad_out[n * out_channels * cols_n..(n + 1) * out_channels * cols_n];
        if let Some(dk) = grad_kernel.as_deref_mut() {
            im2col(g, &input[n * in_len..(n + 1) * in_len], &mut cols);
            gemm_nt(out_channels, cols_n, rows, dout, &cols, dk);
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            dcols.fill(0.0);
            gemm_tn(rows, out_channels, cols_n, kernel, dout, &mut dcols);
            col2im(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Per-(sample, group) statistics saved for the backward pass.
pub(crate) struct GroupNormCache {
    pub normalized: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub(crate) fn group_norm_forward(
    shape: [usize; 4],
    groups: usize,
    input: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, GroupNormCache) {
    let [n, c, h, w] = shape;
    let per_group = c / groups;
    let group_len = per_group * h * w;
    let plane = h * w;
    let mut out = vec![0.0; input.len()];
    let mut normalized = vec![0.0; input.len()];
    let mut inv_std = vec![0.0; n * groups];
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * per_group) * plane;
            let xs = &input[start..start + group_len];
            let mean = xs.iter().sum::<f32>() / group_len as f32;
            let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / group_len as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[s * groups + gi] = rstd;
            for ci in 0..per_group {
                let ch = gi * per_group + ci;
                for p in 0..plane {
                    let idx = start + ci * plane + p;
                    let xhat = (input[idx] - mean) * rstd;
                    normalized[idx] = xhat;
                    out[idx] = gamma[ch] * xhat + beta[ch];
                }
            }
        }
    }
    (out, GroupNormCache { normalized, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward(
    shape: [usize; 4],
    groups: usize,
    cache: &GroupNormCache,
    gamma: &[f32],
    grad_out: &[f32],
    mut grad_input: Option<&mut [f32]>,
    mut grad_gamma: Option<&mut [f32]>,
    mut grad_beta: Option<&mut [f32]>,
) {
    let [n, c, h, w] = shape;
    let per_group = c / groups;
    let plane = h * w;
    let group_len = (per_group * plane) as f32;
    for s in 0..n {
        for gi in 0..groups {
            let start = (s * c + gi * per_group) * plane;
            let mut sum_dxhat = 0.0f32;
            let mut sum_dxhat_xhat = 0.0f32;
            for ci in 0..per_group {
                let ch = gi * per_group + ci;
                let mut dg = 0.0f32;
                let mut db = 0.0f32;
                for p in 0..plane {
                    let idx = start + ci * plane + p;
                    let dy = grad_out[idx];
                    let xhat = cache.normalized[idx];
                    dg += dy * xhat;
                    db += dy;
                    let dxhat = dy * gamma[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if let Some(gg) = grad_gamma.as_deref_mut() {
                    gg[ch] += dg;
                }
                if let Some(gb) = grad_beta.as_deref_mut() {
                    gb[ch] += db;
                }
            }
            if let Some(dx) = grad_input.as_deref_mut() {
                let rstd = cache.inv_std[s * groups + gi];
                let mean_dxhat = sum_dxhat / group_len;
                let mean_dxhat_xhat = sum_dxhat_xhat / group_len;
                for ci in 0..per_group {
                    let ch = gi * per_group + ci;
                    for p in 0..plane {
                        let idx = start + ci * plane + p;
                        let dxhat = grad_out[idx] * gamma[ch];
                        dx[idx] += rstd
                            * (dxhat - mean_dxhat - cache.normalized[idx] * mean_dxhat_xhat);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
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

    fn transpose(rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|v| (v as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c_tn);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c_nt);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-5);
            assert!((c_tn[i] - want[i]).abs() < 1e-5);
            assert!((c_nt[i] - want[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 };
        let x: Vec<f32> = (0..2 * 5 * 4).map(|v| (v as f32 * 0.3).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|v| (v as f32 * 0.17).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, &y, &mut back);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
