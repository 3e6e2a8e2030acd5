//! Dense fp32 kernels behind the tape primitives.

/// `c = a·b (+ c if accumulate)` for row-major `a: m×k`, `b: k×n`, with
/// optional transposed storage of either operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements addressed
    // by the strides above (checked by the debug assertions).
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C,H,W]` image into `[C·k·k, Ho·Wo]` patch columns.
pub fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    im2col_strided(g, x, col, ho * wo, 0);
}

/// [`im2col`] writing row `r` at `col[r·ld + offset..]`, so that a batch can
/// share one column matrix.
fn im2col_strided(g: &ConvGeom, x: &[f32], col: &mut [f32], ld: usize, offset: usize) {
    let (ho, wo) = g.out_hw();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * ld + offset..row * ld + offset + ho * wo];
                let (lo, hi) = valid_range(g, kx, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, v) in line.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` is in
/// bounds.
fn valid_range(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    let limit = g.w + g.pad;
    let hi = if limit <= kx { 0 } else { (limit - kx).div_ceil(g.stride).min(wo) };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `x`.
pub fn col2im(g: &ConvGeom, col: &[f32], x: &mut [f32]) {
    let (ho, wo) = g.out_hw();
    col2im_strided(g, col, x, ho * wo, 0);
}

fn col2im_strided(g: &ConvGeom, col: &[f32], x: &mut [f32], ld: usize, offset: usize) {
    let (ho, wo) = g.out_hw();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * ld + offset..row * ld + offset + ho * wo];
                let (lo, hi) = valid_range(g, kx, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        dst[start..start + hi - lo].iter_mut().zip(&line[lo..hi]).for_each(|(d, v)| *d += v);
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += line[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Patch columns of a whole batch: `[C·k·k, N·Ho·Wo]`, sample-major columns.
fn batch_columns(g: &ConvGeom, batch: usize, x: &[f32]) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_sz = g.in_ch * g.h * g.w;
    let ld = batch * plane;
    let mut col = vec![0.0; g.col_rows() * ld];
    for n in 0..batch {
        im2col_strided(g, &x[n * in_sz..(n + 1) * in_sz], &mut col, ld, n * plane);
    }
    col
}

/// `[N, C, P]` ↔ `[C, N·P]`.
fn to_channel_major(x: &[f32], batch: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for ch in 0..c {
            let src = &x[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            out[ch * batch * plane + n * plane..ch * batch * plane + (n + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn from_channel_major(x: &[f32], batch: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for n in 0..batch {
        for ch in 0..c {
            out[(n * c + ch) * plane..(n * c + ch + 1) * plane]
                .copy_from_slice(&x[ch * batch * plane + n * plane..ch * batch * plane + (n + 1) * plane]);
        }
    }
    out
}

/// Forward convolution of a batch `[N,C,H,W]` with kernel `[O,C,k,k]`.
pub fn conv2d_forward(g: &ConvGeom, batch: usize, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let cols = if g.is_pointwise() {
        to_channel_major(x, batch, g.in_ch, plane)
    } else {
        batch_columns(g, batch, x)
    };
    let ld = batch * plane;
    let mut y = vec![0.0; g.out_ch * ld];
    gemm(g.out_ch, g.col_rows(), ld, w, false, &cols, false, &mut y, false);
    if let Some(b) = b {
        for (o, bias) in b.iter().enumerate() {
            y[o * ld..(o + 1) * ld].iter_mut().for_each(|v| *v += bias);
        }
    }
    from_channel_major(&y, batch, g.out_ch, plane)
}

/// Gradients of [`conv2d_forward`]. Each output buffer is filled only when
/// requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let ld = batch * plane;
    let rows = g.col_rows();
    let pointwise = g.is_pointwise();
    let dy_cm = to_channel_major(dy, batch, g.out_ch, plane);
    if let Some(db) = db {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy_cm[o * ld..(o + 1) * ld].iter().sum::<f32>();
        }
    }
    if let Some(dw) = dw {
        let cols = if pointwise { to_channel_major(x, batch, g.in_ch, plane) } else { batch_columns(g, batch, x) };
        // dW[O, rows] += dY[O, NP] · cols[rows, NP]^T
        gemm(g.out_ch, ld, rows, &dy_cm, false, &cols, true, dw, true);
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0; rows * ld];
        gemm(rows, g.out_ch, ld, w, true, &dy_cm, false, &mut dcol, false);
        if pointwise {
            let back = from_channel_major(&dcol, batch, g.in_ch, plane);
            dx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        } else {
            let in_sz = g.in_ch * g.h * g.w;
            for n in 0..batch {
                col2im_strided(g, &dcol, &mut dx[n * in_sz..(n + 1) * in_sz], ld, n * plane);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
        let (ho, wo) = g.out_hw();
        let mut out = vec![0.0; g.out_ch * ho * wo];
        for o in 0..g.out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.in_ch {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= g.h || ix as usize >= g.w {
                                    continue;
                                }
                                acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((o * g.in_ch + c) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_naive_loop() {
        for (k, stride, pad, h, w) in [(3, 2, 1, 5, 4), (3, 1, 1, 6, 5), (3, 1, 0, 4, 4), (1, 1, 0, 3, 3), (1, 2, 0, 5, 5), (3, 3, 2, 7, 6)] {
            let g = ConvGeom { in_ch: 2, out_ch: 3, h, w, k, stride, pad };
            let n_in = 2 * h * w;
            let x: Vec<f32> = (0..2 * n_in).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
            let wt: Vec<f32> = (0..3 * 2 * k * k).map(|i| ((i * 5) % 13) as f32 * 0.1 - 0.6).collect();
            let fast = conv2d_forward(&g, 2, &x, &wt, None);
            let out = fast.len() / 2;
            for n in 0..2 {
                let slow = naive_conv(&g, &x[n * n_in..(n + 1) * n_in], &wt);
                for (a, b) in fast[n * out..(n + 1) * out].iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-4, "{a} vs {b} for k{k} s{stride} p{pad}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (3, 2, 0), (1, 1, 0)] {
            let g = ConvGeom { in_ch: 2, out_ch: 1, h: 5, w: 6, k, stride, pad };
            let (ho, wo) = g.out_hw();
            let x: Vec<f32> = (0..60).map(|i| ((i * 3) % 7) as f32 - 3.0).collect();
            let c: Vec<f32> = (0..g.col_rows() * ho * wo).map(|i| ((i * 5) % 9) as f32 - 4.0).collect();
            let mut col = vec![0.0; c.len()];
            im2col(&g, &x, &mut col);
            let mut back = vec![0.0; 60];
            col2im(&g, &c, &mut back);
            let lhs: f32 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
        }
    }
}
