//! Convolution, transposed convolution and resampling kernels.
//!
//! Every output element of a convolution is accumulated as
//! `bias + sum_k w[k] * col[k]` with `k = (ci, ky, kx)` ascending. The
//! context-model coding path relies on this order to reproduce the
//! tensor path bit for bit.

use crate::error::{dim_check, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over a `c x h x w` input.
    pub fn conv(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        dim_check!(stride >= 1, "stride must be positive");
        dim_check!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "kernel {k} larger than padded input {h}x{w} (pad {pad})"
        );
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (oh*ow)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows() * p);
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back into an image, adding.
pub fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[m, :] += sum_k a[m, k] * b[k, :]`, `k` ascending per element.
pub fn gemm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, kd: usize, p: usize) {
    debug_assert_eq!(out.len(), m * p);
    debug_assert_eq!(a.len(), m * kd);
    debug_assert_eq!(b.len(), kd * p);
    let mut mi = 0;
    while mi + 4 <= m {
        let (o0, rest) = out[mi * p..(mi + 4) * p].split_at_mut(p);
        let (o1, rest) = rest.split_at_mut(p);
        let (o2, o3) = rest.split_at_mut(p);
        let a0 = &a[mi * kd..(mi + 1) * kd];
        let a1 = &a[(mi + 1) * kd..(mi + 2) * kd];
        let a2 = &a[(mi + 2) * kd..(mi + 3) * kd];
        let a3 = &a[(mi + 3) * kd..(mi + 4) * kd];
        for k in 0..kd {
            let brow = &b[k * p..(k + 1) * p];
            let (w0, w1, w2, w3) = (a0[k], a1[k], a2[k], a3[k]);
            for j in 0..p {
                let bv = brow[j];
                o0[j] += w0 * bv;
                o1[j] += w1 * bv;
                o2[j] += w2 * bv;
                o3[j] += w3 * bv;
            }
        }
        mi += 4;
    }
    for mi in mi..m {
        let orow = &mut out[mi * p..(mi + 1) * p];
        let arow = &a[mi * kd..(mi + 1) * kd];
        for k in 0..kd {
            let w = arow[k];
            let brow = &b[k * p..(k + 1) * p];
            for j in 0..p {
                orow[j] += w * brow[j];
            }
        }
    }
}

/// `out[k, :] += sum_m a[m, k] * g[m, :]` (transposed-left product), `m`
/// ascending per element.
pub fn gemm_tn_acc(out: &mut [f64], a: &[f64], g: &[f64], m: usize, kd: usize, p: usize) {
    debug_assert_eq!(out.len(), kd * p);
    let mut mi = 0;
    while mi + 4 <= m {
        let g0 = &g[mi * p..(mi + 1) * p];
        let g1 = &g[(mi + 1) * p..(mi + 2) * p];
        let g2 = &g[(mi + 2) * p..(mi + 3) * p];
        let g3 = &g[(mi + 3) * p..(mi + 4) * p];
        for k in 0..kd {
            let (w0, w1, w2, w3) = (
                a[mi * kd + k],
                a[(mi + 1) * kd + k],
                a[(mi + 2) * kd + k],
                a[(mi + 3) * kd + k],
            );
            let orow = &mut out[k * p..(k + 1) * p];
            for j in 0..p {
                let mut o = orow[j];
                o += w0 * g0[j];
                o += w1 * g1[j];
                o += w2 * g2[j];
                o += w3 * g3[j];
                orow[j] = o;
            }
        }
        mi += 4;
    }
    for mi in mi..m {
        let grow = &g[mi * p..(mi + 1) * p];
        let arow = &a[mi * kd..(mi + 1) * kd];
        for k in 0..kd {
            let w = arow[k];
            let orow = &mut out[k * p..(k + 1) * p];
            for j in 0..p {
                orow[j] += w * grow[j];
            }
        }
    }
}

/// Fixed-order dot product with four interleaved partial sums.
#[inline]
fn dot4(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let xs = &x[c * 4..c * 4 + 4];
        let ys = &y[c * 4..c * 4 + 4];
        for l in 0..4 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += x[j] * y[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m, k] += sum_j g[m, j] * b[k, j]` (transposed-right product).
pub fn gemm_nt_acc(out: &mut [f64], g: &[f64], b: &[f64], m: usize, kd: usize, p: usize) {
    debug_assert_eq!(out.len(), m * kd);
    for mi in 0..m {
        let grow = &g[mi * p..(mi + 1) * p];
        for k in 0..kd {
            out[mi * kd + k] += dot4(grow, &b[k * p..(k + 1) * p]);
        }
    }
}

fn check_conv_args(x: &Tensor, w: &Tensor, b: &Tensor, in_axis_w: usize) -> Result<()> {
    x.dims4()?;
    dim_check!(w.rank() == 4, "weight must be rank 4, got {:?}", w.shape());
    dim_check!(
        w.shape()[2] == w.shape()[3],
        "only square kernels are supported, got {:?}",
        w.shape()
    );
    dim_check!(
        x.shape()[1] == w.shape()[in_axis_w],
        "input has {} channels but weight {:?} expects {}",
        x.shape()[1],
        w.shape(),
        w.shape()[in_axis_w]
    );
    let out_c = w.shape()[1 - in_axis_w];
    dim_check!(
        b.len() == out_c,
        "bias has {} values for {out_c} output channels",
        b.len()
    );
    Ok(())
}

/// Cross-correlation of an NCHW input with an `[O, I, K, K]` weight.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_args(x, w, b, 1)?;
    let (n, c, h, wd) = x.dims4()?;
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeom::conv(c, h, wd, k, stride, pad)?;
    let p = g.col_cols();
    let kd = g.col_rows();
    let mut out = vec![0.0; n * o * p];
    let mut col = vec![0.0; kd * p];
    for ni in 0..n {
        im2col(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], &g, &mut col);
        let dst = &mut out[ni * o * p..(ni + 1) * o * p];
        for (oc, row) in dst.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        gemm_acc(dst, w.data(), &col, o, kd, p);
    }
    Ok(Tensor::from_parts(vec![n, o, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeom::conv(c, h, wd, k, stride, pad)?;
    let p = g.col_cols();
    let kd = g.col_rows();
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; o];
    let mut col = vec![0.0; kd * p];
    let mut gcol = vec![0.0; kd * p];
    for ni in 0..n {
        let go = &gout.data()[ni * o * p..(ni + 1) * o * p];
        for (oc, row) in go.chunks(p).enumerate() {
            gb[oc] += row.iter().sum::<f64>();
        }
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], &g, &mut col);
            gemm_nt_acc(gw, go, &col, o, kd, p);
        }
        if let Some(gx) = gx.as_mut() {
            gcol.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn_acc(&mut gcol, w.data(), go, o, kd, p);
            col2im(&gcol, &g, &mut gx[ni * c * h * wd..(ni + 1) * c * h * wd]);
        }
    }
    Ok((
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        Tensor::from_parts(vec![o], gb),
    ))
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (input - 1) * stride + k;
    dim_check!(
        full > 2 * pad,
        "transposed conv output would be empty (in {input}, k {k}, stride {stride}, pad {pad})"
    );
    Ok(full - 2 * pad)
}

/// Transposed convolution: the adjoint of [`conv2d`] with the same weight.
///
/// The weight is `[I, O, K, K]` where `I` matches the input channels, i.e.
/// the same tensor a forward convolution from `O` to `I` channels would use.
pub fn deconv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_args(x, w, b, 0)?;
    let (n, a, h, wd) = x.dims4()?;
    let (o, k) = (w.shape()[1], w.shape()[2]);
    let oh = deconv_out_size(h, k, stride, pad)?;
    let ow = deconv_out_size(wd, k, stride, pad)?;
    let g = ConvGeom::conv(o, oh, ow, k, stride, pad)?;
    dim_check!(
        g.oh == h && g.ow == wd,
        "transposed conv geometry does not invert ({h}x{wd} -> {oh}x{ow})"
    );
    let p = g.col_cols();
    let kd = g.col_rows();
    let mut out = vec![0.0; n * o * oh * ow];
    let mut col = vec![0.0; kd * p];
    for ni in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn_acc(&mut col, w.data(), &x.data()[ni * a * p..(ni + 1) * a * p], a, kd, p);
        let dst = &mut out[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        col2im(&col, &g, dst);
        for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
            let bv = b.data()[oc];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(vec![n, o, oh, ow], out))
}

pub fn deconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let (n, a, h, wd) = x.dims4()?;
    let (o, k) = (w.shape()[1], w.shape()[2]);
    let (_, _, oh, ow) = gout.dims4()?;
    let g = ConvGeom::conv(o, oh, ow, k, stride, pad)?;
    let p = g.col_cols();
    let kd = g.col_rows();
    debug_assert_eq!(p, h * wd);
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; o];
    let mut gcol = vec![0.0; kd * p];
    for ni in 0..n {
        let go = &gout.data()[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for (oc, plane) in go.chunks(oh * ow).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
        im2col(go, &g, &mut gcol);
        if let Some(gx) = gx.as_mut() {
            gemm_acc(&mut gx[ni * a * p..(ni + 1) * a * p], w.data(), &gcol, a, kd, p);
        }
        if let Some(gw) = gw.as_mut() {
            gemm_nt_acc(gw, &x.data()[ni * a * p..(ni + 1) * a * p], &gcol, a, kd, p);
        }
    }
    Ok((
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        Tensor::from_parts(vec![o], gb),
    ))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, f: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / f) * w + xx / f];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn upsample_nearest_backward(gout: &Tensor, f: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = gout.dims4()?;
    let (h, w) = (oh / f, ow / f);
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &gout.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / f) * w + xx / f] += src[y * ow + xx];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    /// Direct nested-loop cross-correlation used as an independent oracle.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oc];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((oc * c + ci) * k + ky) * k + kx]
                                        * x.data()[((ni * c + ci) * h + iy as usize) * wd
                                            + ix as usize];
                                }
                            }
                        }
                        out[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let fast = conv2d(&x, &w, &b, s, p).unwrap();
            let slow = conv_oracle(&x, &w, &b, s, p);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "s={s} p={p}");
        }
    }

    #[test]
    fn identity_kernel() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn deconv_block_replication() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = deconv2d(&x, &w, &Tensor::zeros(&[1]), 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn deconv_zero_input_gives_bias() {
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
        let w = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = deconv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        for c in 0..3 {
            let ch = y.channel(0, c).unwrap();
            assert!(ch.data().iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn kernel_larger_than_input_is_dimension_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).is_err());
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).is_err());
    }
}
