//! 2-D convolution and difference convolution (NCHW, zero padding).
//!
//! A difference convolution with center weight `θ` computes, at every output
//! position, `Σ_i w_i · (x_i − θ·x_0)` over the receptive field, where `x_0`
//! is the receptive-field center. Expanding the sum gives an ordinary
//! convolution with the effective kernel `w' = w − θ·(Σ_i w_i)·δ_center`, so
//! both directions reuse the standard im2col kernels below.

use super::{ensure_finite, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Static description of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let op = "conv2d";
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(op, format!("input {input:?} / weight {weight:?} must be 4-D")));
        }
        let (b, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c {
            return Err(Error::shape(op, format!("weight expects {wc} channels, input has {c}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(op, format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(op, format!("kernel {kh} larger than padded input {h}x{w}")));
        }
        Ok(Self {
            batch: b,
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Unfold one image `[C,H,W]` into `[C·K·K, H'·W']`.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let dst = &mut row[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold `[C·K·K, H'·W']` back into `[C,H,W]`, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let npix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += row[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain convolution forward pass on raw buffers. `weight` is `[O,C,K,K]`.
pub fn conv2d_forward_raw<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T]) -> Vec<T> {
    let (plen, npix) = (g.patch_len(), g.out_pixels());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * npix;
    let mut out = vec![T::zero(); g.batch * out_size];
    let mut cols = vec![T::zero(); plen * npix];
    for b in 0..g.batch {
        im2col(g, &input[b * in_size..(b + 1) * in_size], &mut cols);
        let dst = &mut out[b * out_size..(b + 1) * out_size];
        for o in 0..g.out_channels {
            let acc = &mut dst[o * npix..(o + 1) * npix];
            for (ck, &wv) in weight[o * plen..(o + 1) * plen].iter().enumerate() {
                let src = &cols[ck * npix..(ck + 1) * npix];
                acc.iter_mut().zip(src).for_each(|(a, &x)| *a += wv * x);
            }
        }
    }
    out
}

/// Gradients of a plain convolution with respect to input and weight.
fn conv2d_backward_raw<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want_input: bool,
    want_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (plen, npix) = (g.patch_len(), g.out_pixels());
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * npix;
    let mut gx = want_input.then(|| vec![T::zero(); g.batch * in_size]);
    let mut gw = want_weight.then(|| vec![T::zero(); weight.len()]);
    let mut cols = vec![T::zero(); plen * npix];
    for b in 0..g.batch {
        let go = &grad_out[b * out_size..(b + 1) * out_size];
        if let Some(gw) = gw.as_mut() {
            im2col(g, &input[b * in_size..(b + 1) * in_size], &mut cols);
            for o in 0..g.out_channels {
                let gro = &go[o * npix..(o + 1) * npix];
                for ck in 0..plen {
                    let src = &cols[ck * npix..(ck + 1) * npix];
                    let dot = gro.iter().zip(src).fold(T::zero(), |acc, (&a, &x)| acc + a * x);
                    gw[o * plen + ck] += dot;
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            cols.fill(T::zero());
            for o in 0..g.out_channels {
                let gro = &go[o * npix..(o + 1) * npix];
                for ck in 0..plen {
                    let wv = weight[o * plen + ck];
                    let dst = &mut cols[ck * npix..(ck + 1) * npix];
                    dst.iter_mut().zip(gro).for_each(|(d, &x)| *d += wv * x);
                }
            }
            col2im(g, &cols, &mut gx[b * in_size..(b + 1) * in_size]);
        }
    }
    (gx, gw)
}

/// Fold the difference term into the kernel: `w' = w − θ·Σw` at the center tap.
fn effective_kernel<T: Scalar>(weight: &[T], out_c: usize, in_c: usize, k: usize, theta: T) -> Vec<T> {
    let mut w = weight.to_vec();
    if theta == T::zero() {
        return w;
    }
    let kk = k * k;
    let center = (k / 2) * k + k / 2;
    for oc in 0..out_c * in_c {
        let taps = &mut w[oc * kk..(oc + 1) * kk];
        let total = taps.iter().fold(T::zero(), |a, &v| a + v);
        taps[center] -= theta * total;
    }
    w
}

impl<T: Scalar> Tape<T> {
    /// Difference convolution of `input [B,C,H,W]` with `weight [O,C,K,K]`.
    pub fn diff_conv2d(&mut self, input: Var, weight: Var, theta: f64, stride: usize, padding: usize) -> Result<Var> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("theta must lie in [0,1], got {theta}")));
        }
        let g = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        let theta = T::from_f64(theta);
        let w_eff = effective_kernel(self.value(weight).data(), g.out_channels, g.in_channels, g.kernel, theta);
        let out = conv2d_forward_raw(&g, self.value(input).data(), &w_eff);
        let op = if theta == T::zero() { "conv2d" } else { "diff_conv2d" };
        ensure_finite(op, &out)?;
        let value = Tensor::from_parts(g.output_shape().to_vec(), out);
        self.custom(
            op,
            &[input, weight],
            value,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let w_eff = effective_kernel(w, g.out_channels, g.in_channels, g.kernel, theta);
                let (gx, gw_eff) = conv2d_backward_raw(&g, x, &w_eff, ctx.grad_out, ctx.needs[0], ctx.needs[1]);
                // dL/dw_j = dL/dw'_j − θ·dL/dw'_center
                let gw = gw_eff.map(|mut gw| {
                    if theta != T::zero() {
                        let kk = g.kernel * g.kernel;
                        let center = (g.kernel / 2) * g.kernel + g.kernel / 2;
                        for taps in gw.chunks_exact_mut(kk) {
                            let gc = taps[center];
                            taps.iter_mut().for_each(|t| *t -= theta * gc);
                        }
                    }
                    gw
                });
                vec![gx, gw]
            }),
        )
    }

    /// Standard convolution; the `theta = 0` case of [`Tape::diff_conv2d`].
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        self.diff_conv2d(input, weight, 0.0, stride, padding)
    }
}
