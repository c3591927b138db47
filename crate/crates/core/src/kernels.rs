//! Numerical kernels: matrix products, convolution, pooling.
//!
//! Summation order is fixed so every kernel is bit-reproducible:
//!
//! * `matmul`: each output element accumulates `a[i,k]·b[k,j]` for `k`
//!   ascending, starting from zero.
//! * `conv2d`: each output element accumulates over `(c_in, ky, kx)` in
//!   lexicographic order (the im2col row order), then the bias is added.
//! * `global_avg_pool`: row-major sum over the plane, then one division.
//!
//! Convolution is cross-correlation (the kernel is not flipped).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating in `k` order.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    out[..m * n].iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] = aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    out[..m * n].iter_mut().for_each(|v| *v = T::zero());
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// `out[m×n] = a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(format!(
            "matmul {} · {}",
            shape_str(a.shape()),
            shape_str(b.shape())
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 2-D convolution over one `C×H×W` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.kernel_h > ph || self.kernel_w > pw || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::dim(format!(
                "kernel {}×{} does not fit padded input {}×{}",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Unfolds one sample into a `patch_len × (oh·ow)` column matrix.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let pad = g.padding as isize;
    for ci in 0..g.in_channels {
        let plane = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            row[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column-gradient matrix back onto the input plane, accumulating
/// overlapping contributions.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, oh: usize, ow: usize, out: &mut [T]) {
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..g.in_channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let r = (ci * g.kernel_h + ky) * g.kernel_w + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            let idx = (ci * g.height + iy as usize) * g.width + ix as usize;
                            out[idx] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of one sample. `kernels` is `c_out × patch_len`
/// (row-major `C_out×C_in×kh×kw`), `bias` has `c_out` entries.
pub(crate) fn conv2d_forward_raw<T: Scalar>(
    input: &[T],
    kernels: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: &ConvGeometry,
    out: &mut [T],
) -> Result<()> {
    let (oh, ow) = g.output_hw()?;
    let p = oh * ow;
    if g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0 {
        gemm(kernels, input, c_out, g.in_channels, p, out);
    } else {
        let cols = im2col(input, g, oh, ow);
        gemm(kernels, &cols, c_out, g.patch_len(), p, out);
    }
    if let Some(bias) = bias {
        for co in 0..c_out {
            let b = bias[co];
            out[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(())
}

/// Gradients of a single-sample convolution. Accumulates into `grad_kernels`
/// and `grad_bias`; writes (overwrites) `grad_input` when given.
pub(crate) fn conv2d_backward_raw<T: Scalar>(
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    c_out: usize,
    g: &ConvGeometry,
    grad_kernels: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
    grad_input: Option<&mut [T]>,
) -> Result<()> {
    let (oh, ow) = g.output_hw()?;
    let p = oh * ow;
    let k = g.patch_len();
    let pointwise = g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
    if let Some(gk) = grad_kernels {
        let cols_owned;
        let cols: &[T] = if pointwise {
            input
        } else {
            cols_owned = im2col(input, g, oh, ow);
            &cols_owned
        };
        let mut tmp = vec![T::zero(); c_out * k];
        gemm_nt(grad_out, cols, c_out, p, k, &mut tmp);
        for (a, b) in gk.iter_mut().zip(tmp) {
            *a += b;
        }
    }
    if let Some(gb) = grad_bias {
        for co in 0..c_out {
            let mut acc = T::zero();
            for &v in &grad_out[co * p..(co + 1) * p] {
                acc += v;
            }
            gb[co] += acc;
        }
    }
    if let Some(gi) = grad_input {
        let mut gcols = vec![T::zero(); k * p];
        gemm_tn(kernels, grad_out, c_out, k, p, &mut gcols);
        if pointwise {
            gi.copy_from_slice(&gcols);
        } else {
            gi.iter_mut().for_each(|v| *v = T::zero());
            col2im(&gcols, g, oh, ow, gi);
        }
    }
    Ok(())
}

/// Cross-correlation of a `C_in×H×W` input with `C_out×C_in×kh×kw` kernels.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.ndim() != 3 || kernels.ndim() != 4 || kernels.shape()[1] != input.shape()[0] {
        return Err(Error::dim(format!(
            "conv2d input {} with kernels {}",
            shape_str(input.shape()),
            shape_str(kernels.shape())
        )));
    }
    let ks = kernels.shape();
    let g = ConvGeometry {
        in_channels: input.shape()[0],
        height: input.shape()[1],
        width: input.shape()[2],
        kernel_h: ks[2],
        kernel_w: ks[3],
        stride,
        padding,
    };
    let (oh, ow) = g.output_hw()?;
    let mut out = vec![T::zero(); ks[0] * oh * ow];
    conv2d_forward_raw(input.data(), kernels.data(), None, ks[0], &g, &mut out)?;
    Tensor::new(vec![ks[0], oh, ow], out)
}

/// Max-pooling window description. Padding positions never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2d {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Pool2d {
    pub const HALVING: Pool2d = Pool2d {
        window: 2,
        stride: 2,
        padding: 0,
    };

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 || self.padding >= self.window {
            return Err(Error::dim(format!("invalid pooling window {self:?}")));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.window > ph || self.window > pw {
            return Err(Error::dim(format!(
                "pool window {} larger than input {}×{}",
                self.window, h, w
            )));
        }
        // Unpadded pooling must tile the input exactly.
        if self.padding == 0 && ((h - self.window) % self.stride != 0 || (w - self.window) % self.stride != 0) {
            return Err(Error::dim(format!(
                "spatial extent {}×{} not divisible by pool window {}/stride {}",
                h, w, self.window, self.stride
            )));
        }
        Ok((
            (ph - self.window) / self.stride + 1,
            (pw - self.window) / self.stride + 1,
        ))
    }
}

/// Max-pools one `C×H×W` sample; `argmax` receives, per output element, the
/// flat index into the sample of the winning input (first wins ties).
pub(crate) fn max_pool_raw<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    pool: &Pool2d,
    out: &mut [T],
    argmax: &mut [usize],
) -> Result<()> {
    let (oh, ow) = pool.output_hw(h, w)?;
    let pad = pool.padding as isize;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for wy in 0..pool.window {
                    let iy = (oy * pool.stride + wy) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for wx in 0..pool.window {
                        let ix = (ox * pool.stride + wx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ch * h + iy as usize) * w + ix as usize;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(())
}

pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, pool: Pool2d) -> Result<(Tensor<T>, Vec<usize>)> {
    if input.ndim() != 3 {
        return Err(Error::dim(format!(
            "max_pool2d needs C×H×W, got {}",
            shape_str(input.shape())
        )));
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = pool.output_hw(h, w)?;
    let mut out = vec![T::zero(); c * oh * ow];
    let mut idx = vec![0; c * oh * ow];
    max_pool_raw(input.data(), c, h, w, &pool, &mut out, &mut idx)?;
    Ok((Tensor::new(vec![c, oh, ow], out)?, idx))
}

pub(crate) fn global_avg_pool_raw<T: Scalar>(input: &[T], c: usize, plane: usize, out: &mut [T]) {
    let denom = T::lit(plane as f64);
    for ch in 0..c {
        let mut acc = T::zero();
        for &v in &input[ch * plane..(ch + 1) * plane] {
            acc += v;
        }
        out[ch] = acc / denom;
    }
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.ndim() != 3 {
        return Err(Error::dim(format!(
            "global_avg_pool needs C×H×W, got {}",
            shape_str(input.shape())
        )));
    }
    let c = input.shape()[0];
    let mut out = vec![T::zero(); c];
    global_avg_pool_raw(input.data(), c, input.shape()[1] * input.shape()[2], &mut out);
    Tensor::new(vec![c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor32::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor32, b: &Tensor32) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a.data()[i * k + kk] as f64 * b.data()[kk * n + j] as f64;
                }
            }
        }
        out
    }

    fn naive_conv(x: &Tensor32, w: &Tensor32, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        (vec![co, oh, ow], out)
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let x = Tensor32::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor32::identity(2), &x).unwrap(), x);
        let a = Tensor32::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor32::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - e).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor32::zeros(&[2, 3]), &Tensor32::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2×3] · [2×3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = random(&[4, 6], 3);
        let b = random(&[4, 5], 4);
        let mut tn = vec![0.0; 30];
        gemm_tn(a.data(), b.data(), 4, 6, 5, &mut tn);
        let want = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert_eq!(tn, want.data());
        let c = random(&[5, 6], 5);
        let mut nt = vec![0.0; 20];
        gemm_nt(a.data(), c.data(), 4, 6, 5, &mut nt);
        let want = matmul(&a, &c.transpose().unwrap()).unwrap();
        for (x, y) in nt.iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_hand_cases() {
        let ones = Tensor32::full(&[1, 3, 3], 1.0);
        let two = Tensor32::full(&[1, 1, 1, 1], 2.0);
        assert_eq!(conv2d(&ones, &two, 1, 0).unwrap(), Tensor32::full(&[1, 3, 3], 2.0));
        let seq = Tensor32::from_fn(&[1, 3, 3], |i| (i + 1) as f32);
        let sum = Tensor32::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(conv2d(&seq, &sum, 1, 0).unwrap().data(), &[45.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = random(&[4, 8, 8], 7);
        let w = random(&[6, 4, 3, 3], 8);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 3)] {
            let got = conv2d(&x, &w, stride, pad).unwrap();
            let (shape, want) = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), &shape[..]);
            for (g, e) in got.data().iter().zip(want) {
                assert!((*g as f64 - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor32::zeros(&[1, 2, 2]);
        let w = Tensor32::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(Error::Dimension(_))));
        assert!(conv2d(&x, &w, 1, 1).is_ok());
    }

    #[test]
    fn conv_identity_kernel() {
        let x = random(&[3, 5, 4], 9);
        let mut w = Tensor32::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_is_linear() {
        let x = random(&[2, 6, 6], 10);
        let y = random(&[2, 6, 6], 11);
        let w = random(&[3, 2, 3, 3], 12);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&mix, &w, 1, 1).unwrap();
        let cx = conv2d(&x, &w, 1, 1).unwrap();
        let cy = conv2d(&y, &w, 1, 1).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn max_pool_hand_cases() {
        let x = Tensor32::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = max_pool2d(&x, Pool2d::HALVING).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let c = Tensor32::full(&[1, 4, 4], 5.0);
        let (y, idx) = max_pool2d(&c, Pool2d::HALVING).unwrap();
        assert_eq!(y, Tensor32::full(&[1, 2, 2], 5.0));
        assert_eq!(idx, vec![0, 2, 8, 10]);
    }

    #[test]
    fn max_pool_odd_extent_rejected() {
        let x = Tensor32::zeros(&[1, 3, 4]);
        assert!(matches!(max_pool2d(&x, Pool2d::HALVING), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_pool_matches_window_scan_and_dominates_mean() {
        let x = random(&[3, 6, 6], 13);
        let (y, _) = max_pool2d(&x, Pool2d::HALVING).unwrap();
        for c in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let vals: Vec<f32> = (0..4)
                        .map(|k| x.data()[(c * 6 + 2 * oy + k / 2) * 6 + 2 * ox + k % 2])
                        .collect();
                    let m = vals.iter().cloned().fold(f32::MIN, f32::max);
                    let mean = vals.iter().sum::<f32>() / 4.0;
                    let got = y.data()[(c * 3 + oy) * 3 + ox];
                    assert_eq!(got, m);
                    assert!(got >= mean);
                }
            }
        }
    }

    #[test]
    fn padded_pool_floor_semantics() {
        let x = random(&[2, 9, 9], 14);
        let pool = Pool2d {
            window: 3,
            stride: 2,
            padding: 1,
        };
        let (y, _) = max_pool2d(&x, pool).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5]);
    }

    #[test]
    fn global_avg_pool_cases() {
        let x = Tensor32::new(vec![2, 1, 1], vec![5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[5.0, 7.0]);
        let x = Tensor32::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let x = random(&[8, 7, 7], 15);
        let y = global_avg_pool(&x).unwrap();
        for c in 0..8 {
            let m: f64 = x.data()[c * 49..(c + 1) * 49].iter().map(|&v| v as f64).sum::<f64>() / 49.0;
            assert!((y.data()[c] as f64 - m).abs() < 1e-6);
        }
    }

    #[test]
    fn kernels_are_bit_reproducible() {
        let x = random(&[4, 8, 8], 16);
        let w = random(&[6, 4, 3, 3], 17);
        let a = conv2d(&x, &w, 1, 1).unwrap();
        let b = conv2d(&x, &w, 1, 1).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
