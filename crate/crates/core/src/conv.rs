//! Raw 2D convolution kernels over flat row-major buffers.
//!
//! All three routines here (forward, input gradient, kernel gradient) use a
//! fixed sequential accumulation order so repeated runs are bit-identical.
//! Convolution is cross-correlation in the conv-net sense: no kernel flip.

use crate::error::{CoreError, Result};
use crate::tensor::Scalar;

/// Output spatial size of conv2d: floor((len + 2*pad - k) / stride) + 1.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(CoreError::InvalidArgument("stride must be positive".into()));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("spatial extent {len} + 2*{pad} padding is smaller than kernel {k}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// Output spatial size of conv2d_transpose: (len - 1) * stride + k - 2*pad.
pub fn conv_transpose_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(CoreError::InvalidArgument("stride must be positive".into()));
    }
    let grown = (len - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d_transpose",
            detail: format!("padding {pad} larger than produced extent for input {len}, kernel {k}"),
        });
    }
    Ok(grown - 2 * pad)
}

/// Range of output positions whose kernel window lies fully inside the
/// input: for ox in this range, ox*stride - pad >= 0 and
/// ox*stride - pad + k <= len.
fn interior_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.div_ceil(stride).min(out_len);
    let hi = if len + pad >= k {
        (((len + pad - k) / stride) + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// out[n,f,oh,ow] = sum over c,i,j of x[n,c,oh*s+i-p, ow*s+j-p] * k[f,c,i,j].
///
/// `xs` is [N,C,H,W], `ks` is [F,C,kh,kw]. Returns a [N,F,OH,OW] buffer.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    k: &[T],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
) -> Result<Vec<T>> {
    let [n_batch, c_in, h, w] = xs;
    let [f_out, kc, kh, kw] = ks;
    if kc != c_in {
        return Err(CoreError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input channel axis is {c_in} but kernel channel axis is {kc}"),
        });
    }
    let oh = conv_out_len(h, kh, stride, pad)?;
    let ow = conv_out_len(w, kw, stride, pad)?;
    let (ox_lo, ox_hi) = interior_range(ow, w, kw, stride, pad);
    let nonzero = nonzero_blocks(k, f_out, c_in, kh * kw);
    let mut out = vec![T::zero(); n_batch * f_out * oh * ow];

    for n in 0..n_batch {
        for f in 0..f_out {
            for oy in 0..oh {
                let out_row =
                    &mut out[((n * f_out + f) * oh + oy) * ow..((n * f_out + f) * oh + oy + 1) * ow];
                for c in 0..c_in {
                    if !nonzero[f * c_in + c] {
                        continue;
                    }
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x[((n * c_in + c) * h + iy as usize) * w..][..w];
                        let k_row = &k[((f * c_in + c) * kh + i) * kw..][..kw];
                        // boundary columns with clipped kernel windows
                        for ox in (0..ox_lo).chain(ox_hi..ow) {
                            let base = (ox * stride) as isize - pad as isize;
                            let j_lo = (-base).max(0) as usize;
                            let j_hi = kw.min((w as isize - base).max(0) as usize);
                            let mut acc = T::zero();
                            for j in j_lo..j_hi {
                                acc = acc + x_row[(base + j as isize) as usize] * k_row[j];
                            }
                            out_row[ox] = out_row[ox] + acc;
                        }
                        // interior: tap-outer loops over contiguous rows
                        // vectorize; stride 1 is the hot path
                        if stride == 1 && ox_hi > ox_lo {
                            let base0 = ox_lo - pad;
                            let run = ox_hi - ox_lo;
                            for (j, &kv) in k_row.iter().enumerate() {
                                let xs = &x_row[base0 + j..base0 + j + run];
                                for (o, &xv) in out_row[ox_lo..ox_hi].iter_mut().zip(xs) {
                                    *o = *o + xv * kv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let base = ox * stride - pad;
                                let mut acc = T::zero();
                                for (&xv, &kv) in x_row[base..base + kw].iter().zip(k_row) {
                                    acc = acc + xv * kv;
                                }
                                out_row[ox] = out_row[ox] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per (filter, channel) flag: does the kh*kw block hold any nonzero tap?
/// Lets block-diagonal kernels (the embedded wavelet transform) skip the
/// channels they never touch.
fn nonzero_blocks<T: Scalar>(k: &[T], f_out: usize, c_in: usize, block: usize) -> Vec<bool> {
    (0..f_out * c_in)
        .map(|fc| k[fc * block..(fc + 1) * block].iter().any(|&v| v != T::zero()))
        .collect()
}

/// Adjoint of [`conv2d_forward`] with respect to its input: scatters
/// `g` (shaped [N,F,OH,OW]) back through the kernel into an [N,C,H,W]
/// buffer of shape `xs`. This is also the forward pass of
/// conv2d_transpose, with the roles of input and gradient swapped.
pub fn conv2d_input_grad<T: Scalar>(
    g: &[T],
    gs: [usize; 4],
    k: &[T],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
    xs: [usize; 4],
) -> Vec<T> {
    let [n_batch, f_out, oh, ow] = gs;
    let [_, c_in, kh, kw] = ks;
    let [_, _, h, w] = xs;
    let (ox_lo, ox_hi) = interior_range(ow, w, kw, stride, pad);
    let nonzero = nonzero_blocks(k, f_out, c_in, kh * kw);
    let mut dx = vec![T::zero(); n_batch * c_in * h * w];

    for n in 0..n_batch {
        for f in 0..f_out {
            for oy in 0..oh {
                let g_row = &g[((n * f_out + f) * oh + oy) * ow..][..ow];
                for c in 0..c_in {
                    if !nonzero[f * c_in + c] {
                        continue;
                    }
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dx_row = &mut dx[((n * c_in + c) * h + iy as usize) * w..][..w];
                        let k_row = &k[((f * c_in + c) * kh + i) * kw..][..kw];
                        for ox in (0..ox_lo).chain(ox_hi..ow) {
                            let gv = g_row[ox];
                            let base = (ox * stride) as isize - pad as isize;
                            let j_lo = (-base).max(0) as usize;
                            let j_hi = kw.min((w as isize - base).max(0) as usize);
                            for j in j_lo..j_hi {
                                let ix = (base + j as isize) as usize;
                                dx_row[ix] = dx_row[ix] + gv * k_row[j];
                            }
                        }
                        if stride == 1 && ox_hi > ox_lo {
                            let base0 = ox_lo - pad;
                            let run = ox_hi - ox_lo;
                            for (j, &kv) in k_row.iter().enumerate() {
                                let dst = &mut dx_row[base0 + j..base0 + j + run];
                                for (dv, &gv) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                    *dv = *dv + gv * kv;
                                }
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let gv = g_row[ox];
                                let base = ox * stride - pad;
                                for (dv, &kv) in dx_row[base..base + kw].iter_mut().zip(k_row) {
                                    *dv = *dv + gv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv2d_forward`] with respect to the kernel:
/// dk[f,c,i,j] = sum over n,oh,ow of g[n,f,oh,ow] * x[n,c,oh*s+i-p, ow*s+j-p].
pub fn conv2d_kernel_grad<T: Scalar>(
    g: &[T],
    gs: [usize; 4],
    x: &[T],
    xs: [usize; 4],
    stride: usize,
    pad: usize,
    ks: [usize; 4],
) -> Vec<T> {
    let [n_batch, f_out, oh, ow] = gs;
    let [_, c_in, h, w] = xs;
    let [_, _, kh, kw] = ks;
    let (ox_lo, ox_hi) = interior_range(ow, w, kw, stride, pad);
    let mut dk = vec![T::zero(); f_out * c_in * kh * kw];

    for n in 0..n_batch {
        for f in 0..f_out {
            for oy in 0..oh {
                let g_row = &g[((n * f_out + f) * oh + oy) * ow..][..ow];
                for c in 0..c_in {
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x[((n * c_in + c) * h + iy as usize) * w..][..w];
                        let dk_row = &mut dk[((f * c_in + c) * kh + i) * kw..][..kw];
                        for ox in (0..ox_lo).chain(ox_hi..ow) {
                            let gv = g_row[ox];
                            let base = (ox * stride) as isize - pad as isize;
                            let j_lo = (-base).max(0) as usize;
                            let j_hi = kw.min((w as isize - base).max(0) as usize);
                            for j in j_lo..j_hi {
                                dk_row[j] = dk_row[j] + gv * x_row[(base + j as isize) as usize];
                            }
                        }
                        if stride == 1 && ox_hi > ox_lo {
                            let base0 = ox_lo - pad;
                            let run = ox_hi - ox_lo;
                            for (j, dv) in dk_row.iter_mut().enumerate() {
                                let xs = &x_row[base0 + j..base0 + j + run];
                                let mut acc = T::zero();
                                for (&gv, &xv) in g_row[ox_lo..ox_hi].iter().zip(xs) {
                                    acc = acc + gv * xv;
                                }
                                *dv = *dv + acc;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let gv = g_row[ox];
                                let base = ox * stride - pad;
                                for (dv, &xv) in dk_row.iter_mut().zip(&x_row[base..base + kw]) {
                                    *dv = *dv + gv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    /// Direct six-nested-loop reference convolution, kept deliberately naive.
    fn conv2d_reference(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n_batch, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (f_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n_batch * f_out * oh * ow];
        for n in 0..n_batch {
            for f in 0..f_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                                    {
                                        acc += x.at4(n, c, iy as usize, ix as usize)
                                            * k.at4(f, c, i, j);
                                    }
                                }
                            }
                        }
                        out[((n * f_out + f) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n_batch, f_out, oh, ow], out).unwrap()
    }

    #[test]
    fn all_ones_3x3_gives_nine() {
        let x = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(x.data(), [1, 1, 3, 3], k.data(), [1, 1, 3, 3], 1, 0).unwrap();
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut k = Tensor::<f64>::filled(&[3, 3, 1, 1], 0.0);
        // one 1.0 per output channel on the matching input channel
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let out = conv2d_forward(x.data(), [2, 3, 4, 4], k.data(), [3, 3, 1, 1], 1, 0).unwrap();
        assert_eq!(out, x.data());
    }

    #[test]
    fn matches_reference_on_random_input() {
        let mut rng = Rng::new(17);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
            let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            let got =
                conv2d_forward(x.data(), [1, 2, 5, 5], k.data(), [3, 2, 3, 3], stride, pad)
                    .unwrap();
            let want = conv2d_reference(&x, &k, stride, pad);
            for (a, b) in got.iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <conv(x,k), y> == <x, conv_input_grad(y,k)> for random x, y, k
        let mut rng = Rng::new(23);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (2, 0), (3, 2)] {
            let xs = [2, 2, 6, 6];
            let ks = [3, 2, 3, 3];
            let x = Tensor::<f64>::randn(&xs, 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&ks, 1.0, &mut rng);
            let oh = conv_out_len(6, 3, stride, pad).unwrap();
            let ow = oh;
            let gs = [2, 3, oh, ow];
            let y = Tensor::<f64>::randn(&gs, 1.0, &mut rng);

            let cx = conv2d_forward(x.data(), xs, k.data(), ks, stride, pad).unwrap();
            let cty = conv2d_input_grad(y.data(), gs, k.data(), ks, stride, pad, xs);

            let lhs: f64 = cx.iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(&cty).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10,
                "adjoint violated at stride {stride} pad {pad}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn transpose_of_unit_input_reproduces_kernel() {
        // stride-2 transpose of a 1x1x1x1 input with a 2x2 kernel
        let g = [3.0f64];
        let k = vec![0.5, -1.0, 2.0, 0.25];
        let out = conv2d_input_grad(&g, [1, 1, 1, 1], &k, [1, 1, 2, 2], 2, 0, [1, 1, 2, 2]);
        assert_eq!(out, vec![1.5, -3.0, 6.0, 0.75]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let g = vec![0.0f64; 4];
        let k = vec![1.0, 2.0, 3.0, 4.0];
        let out = conv2d_input_grad(&g, [1, 1, 2, 2], &k, [1, 1, 2, 2], 2, 0, [1, 1, 4, 4]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_len_rejects_kernel_larger_than_input() {
        let err = conv_out_len(2, 5, 1, 0).unwrap_err();
        assert!(err.to_string().contains("smaller than kernel"));
    }

    #[test]
    fn padding_wider_than_output_still_matches_reference() {
        // every window clips: the interior fast path must stay empty
        let mut rng = Rng::new(71);
        let x = Tensor::<f64>::randn(&[1, 1, 1, 1], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 1, 6, 6], 1.0, &mut rng);
        let got = conv2d_forward(x.data(), [1, 1, 1, 1], k.data(), [1, 1, 6, 6], 1, 3).unwrap();
        let want = conv2d_reference(&x, &k, 1, 3);
        assert_eq!(got.len(), want.numel());
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
