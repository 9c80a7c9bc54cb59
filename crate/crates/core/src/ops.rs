//! Raw forward/backward kernels for the tensor ops.
//!
//! Every kernel accumulates in a fixed loop order so that identical inputs
//! produce bit-identical outputs regardless of thread count; rayon is only
//! used across disjoint output planes.

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{DrnError, Result};
use crate::tensor::Tensor;

/// `out[i] += w * a[i]` over equal-length slices.
#[inline]
fn axpy<E: Element>(out: &mut [E], a: &[E], w: E) {
    for (o, &v) in out.iter_mut().zip(a.iter()) {
        *o = *o + w * v;
    }
}

/// Four-lane dot product with a fixed combination order.
#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (pa, pb) in ca.zip(cb) {
        acc[0] = acc[0] + pa[0] * pb[0];
        acc[1] = acc[1] + pa[1] * pb[1];
        acc[2] = acc[2] + pa[2] * pb[2];
        acc[3] = acc[3] + pa[3] * pb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (pa, pb) in ra.iter().zip(rb.iter()) {
        s = s + *pa * *pb;
    }
    s
}

/// Output extent of a convolution axis: `floor((len + 2*pad - k) / stride) + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(DrnError::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let padded = len + 2 * padding;
    if padded < k {
        return Err(DrnError::InvalidArgument(format!(
            "conv2d: kernel extent {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_shapes<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<()> {
    let [_, in_c, _, _] = input.shape();
    let [out_c, w_in_c, _, _] = weight.shape();
    if in_c != w_in_c {
        return Err(DrnError::InvalidArgument(format!(
            "conv2d: input channel dim {in_c} does not match weight in-channel dim {w_in_c}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [1, out_c, 1, 1] && b.numel() != out_c {
            return Err(DrnError::InvalidArgument(format!(
                "conv2d: bias has {} values, expected out-channel dim {out_c}",
                b.numel()
            )));
        }
    }
    Ok(())
}

/// Direct sliding-window convolution with zero padding.
pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    check_conv_shapes(input, weight, bias)?;
    let [n, in_c, h, w] = input.shape();
    let [out_c, _, kh, kw] = weight.shape();
    let oh = conv_out_len(h, kh, stride, padding)?;
    let ow = conv_out_len(w, kw, stride, padding)?;

    let mut out = Tensor::zeros([n, out_c, oh, ow]);
    let plane = oh * ow;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let (ni, oc) = (idx / out_c, idx % out_c);
            if let Some(b) = bias {
                let bv = b.data()[oc];
                for o in out_plane.iter_mut() {
                    *o = bv;
                }
            }
            for ic in 0..in_c {
                let in_plane = input.plane(ni, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight.at(oc, ic, ky, kx);
                        if wv == E::zero() {
                            continue;
                        }
                        accumulate_rows(
                            out_plane, in_plane, wv, oh, ow, h, w, ky, kx, stride, padding,
                        );
                    }
                }
            }
        });
    Ok(out)
}

/// `out[oy][ox] += w * in[oy*s+ky-p][ox*s+kx-p]` over the valid range.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_rows<E: Element>(
    out_plane: &mut [E],
    in_plane: &[E],
    wv: E,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    let (ox_min, ox_max) = valid_range(ow, w, kx, stride, padding);
    if ox_min >= ox_max {
        return;
    }
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
        let out_row = &mut out_plane[oy * ow + ox_min..oy * ow + ox_max];
        let ix0 = (ox_min * stride + kx) - padding;
        if stride == 1 {
            axpy(out_row, &in_row[ix0..ix0 + out_row.len()], wv);
        } else {
            let mut ix = ix0;
            for o in out_row.iter_mut() {
                *o = *o + wv * in_row[ix];
                ix += stride;
            }
        }
    }
}

/// Valid `[ox_min, ox_max)` so that `ox*stride + kx - padding` stays in `[0, w)`.
#[inline]
fn valid_range(ow: usize, w: usize, kx: usize, stride: usize, padding: usize) -> (usize, usize) {
    let ox_min = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let last_ix = w as isize - 1 + padding as isize - kx as isize;
    if last_ix < 0 {
        return (0, 0);
    }
    let ox_max = (last_ix as usize / stride + 1).min(ow);
    (ox_min.min(ox_max), ox_max)
}

pub struct ConvGrads<E: Element> {
    pub input: Option<Tensor<E>>,
    pub weight: Option<Tensor<E>>,
    pub bias: Option<Tensor<E>>,
}

/// Gradients of [`conv2d_forward`] with respect to the requested operands.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    dout: &Tensor<E>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<E> {
    let [n, in_c, h, w] = input.shape();
    let [out_c, _, kh, kw] = weight.shape();
    let [_, _, oh, ow] = dout.shape();

    let d_input = need_input.then(|| {
        let mut din = Tensor::zeros([n, in_c, h, w]);
        let plane = h * w;
        din.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, din_plane)| {
                let (ni, ic) = (idx / in_c, idx % in_c);
                for oc in 0..out_c {
                    let dout_plane = dout.plane(ni, oc);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight.at(oc, ic, ky, kx);
                            scatter_rows(
                                din_plane, dout_plane, wv, oh, ow, h, w, ky, kx, stride, padding,
                            );
                        }
                    }
                }
            });
        din
    });

    let d_weight = need_weight.then(|| {
        let mut dw = Tensor::zeros([out_c, in_c, kh, kw]);
        let per_oc = in_c * kh * kw;
        dw.data_mut()
            .par_chunks_mut(per_oc)
            .enumerate()
            .for_each(|(oc, dw_slice)| {
                for ic in 0..in_c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = E::zero();
                            for ni in 0..n {
                                acc = acc
                                    + window_dot(
                                        input.plane(ni, ic),
                                        dout.plane(ni, oc),
                                        oh,
                                        ow,
                                        h,
                                        w,
                                        ky,
                                        kx,
                                        stride,
                                        padding,
                                    );
                            }
                            dw_slice[(ic * kh + ky) * kw + kx] = acc;
                        }
                    }
                }
            });
        dw
    });

    let d_bias = need_bias.then(|| {
        let mut db = Tensor::zeros([1, out_c, 1, 1]);
        for oc in 0..out_c {
            let mut acc = E::zero();
            for ni in 0..n {
                for &g in dout.plane(ni, oc) {
                    acc = acc + g;
                }
            }
            db.data_mut()[oc] = acc;
        }
        db
    });

    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// `din[oy*s+ky-p][ox*s+kx-p] += w * dout[oy][ox]` over the valid range.
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_rows<E: Element>(
    din_plane: &mut [E],
    dout_plane: &[E],
    wv: E,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    if wv == E::zero() {
        return;
    }
    let (ox_min, ox_max) = valid_range(ow, w, kx, stride, padding);
    if ox_min >= ox_max {
        return;
    }
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let din_row = &mut din_plane[iy as usize * w..iy as usize * w + w];
        let dout_row = &dout_plane[oy * ow + ox_min..oy * ow + ox_max];
        let ix0 = (ox_min * stride + kx) - padding;
        if stride == 1 {
            axpy(&mut din_row[ix0..ix0 + dout_row.len()], dout_row, wv);
        } else {
            let mut ix = ix0;
            for &g in dout_row.iter() {
                din_row[ix] = din_row[ix] + wv * g;
                ix += stride;
            }
        }
    }
}

/// `sum_{oy,ox} in[oy*s+ky-p][ox*s+kx-p] * dout[oy][ox]` over the valid range.
#[inline]
#[allow(clippy::too_many_arguments)]
fn window_dot<E: Element>(
    in_plane: &[E],
    dout_plane: &[E],
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) -> E {
    let (ox_min, ox_max) = valid_range(ow, w, kx, stride, padding);
    let mut acc = E::zero();
    if ox_min >= ox_max {
        return acc;
    }
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
        let dout_row = &dout_plane[oy * ow + ox_min..oy * ow + ox_max];
        let ix0 = (ox_min * stride + kx) - padding;
        if stride == 1 {
            acc = acc + dot(&in_row[ix0..ix0 + dout_row.len()], dout_row);
        } else {
            let mut ix = ix0;
            for &g in dout_row.iter() {
                acc = acc + in_row[ix] * g;
                ix += stride;
            }
        }
    }
    acc
}

/// Channel-to-space permutation `(n, c*r^2, h, w) -> (n, c, r*h, r*w)`.
pub fn pixel_shuffle<E: Element>(input: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let [n, c_in, h, w] = input.shape();
    if r == 0 || c_in % (r * r) != 0 {
        return Err(DrnError::InvalidArgument(format!(
            "pixel_shuffle: channel dim {c_in} is not divisible by r^2 = {}",
            r * r
        )));
    }
    let c = c_in / (r * r);
    let mut out = Tensor::zeros([n, c, r * h, r * w]);
    for ni in 0..n {
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            *out.at_mut(ni, co, y * r + dy, x * r + dx) = input.at(ni, ci, y, x);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Space-to-channel permutation, exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<E: Element>(input: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let [n, c, rh, rw] = input.shape();
    if r == 0 || rh % r != 0 || rw % r != 0 {
        return Err(DrnError::InvalidArgument(format!(
            "pixel_unshuffle: spatial dims ({rh}, {rw}) are not divisible by r = {r}"
        )));
    }
    let (h, w) = (rh / r, rw / r);
    let mut out = Tensor::zeros([n, c * r * r, h, w]);
    for ni in 0..n {
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            *out.at_mut(ni, ci, y, x) = input.at(ni, co, y * r + dy, x * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Spatial mean per `(n, c)` plane, `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = input.shape();
    if h * w == 0 {
        return Err(DrnError::InvalidArgument(
            "global_avg_pool: spatial size is zero".into(),
        ));
    }
    let inv = E::from_f64_val(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = E::zero();
            for &v in input.plane(ni, ci) {
                acc = acc + v;
            }
            out.data_mut()[ni * c + ci] = acc * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<E: Element>(dout: &Tensor<E>, h: usize, w: usize) -> Tensor<E> {
    let [n, c, _, _] = dout.shape();
    let inv = E::from_f64_val(1.0 / (h * w) as f64);
    let mut din = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let g = dout.at(ni, ci, 0, 0) * inv;
            for v in din.plane_mut(ni, ci) {
                *v = g;
            }
        }
    }
    din
}

pub fn check_same_shape<E: Element>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DrnError::InvalidArgument(format!(
            "{op}: shape {:?} does not match shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape("elementwise_add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape(), data)
}

/// `(n, c, h, w) * (n, c, 1, 1)`, the channel-wise attention rescale.
pub fn mul_broadcast<E: Element>(a: &Tensor<E>, scale: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, _, _] = a.shape();
    if scale.shape() != [n, c, 1, 1] {
        return Err(DrnError::InvalidArgument(format!(
            "elementwise_mul_broadcast: scale shape {:?} is not ({n}, {c}, 1, 1)",
            scale.shape()
        )));
    }
    let mut out = Tensor::zeros(a.shape());
    for ni in 0..n {
        for ci in 0..c {
            let s = scale.at(ni, ci, 0, 0);
            let src = a.plane(ni, ci);
            for (o, &v) in out.plane_mut(ni, ci).iter_mut().zip(src.iter()) {
                *o = v * s;
            }
        }
    }
    Ok(out)
}

pub fn concat_channels<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb || ha != hb || wa != wb {
        return Err(DrnError::InvalidArgument(format!(
            "concat_channels: non-channel dims differ, ({na}, {ha}, {wa}) vs ({nb}, {hb}, {wb})"
        )));
    }
    let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
    for ni in 0..na {
        for ci in 0..ca {
            out.plane_mut(ni, ci).copy_from_slice(a.plane(ni, ci));
        }
        for ci in 0..cb {
            out.plane_mut(ni, ca + ci).copy_from_slice(b.plane(ni, ci));
        }
    }
    Ok(out)
}

/// Splits an upstream gradient back into the two concat operands.
pub fn concat_channels_backward<E: Element>(
    dout: &Tensor<E>,
    ca: usize,
    cb: usize,
) -> (Tensor<E>, Tensor<E>) {
    let [n, _, h, w] = dout.shape();
    let mut da = Tensor::zeros([n, ca, h, w]);
    let mut db = Tensor::zeros([n, cb, h, w]);
    for ni in 0..n {
        for ci in 0..ca {
            da.plane_mut(ni, ci).copy_from_slice(dout.plane(ni, ci));
        }
        for ci in 0..cb {
            db.plane_mut(ni, ci).copy_from_slice(dout.plane(ni, ca + ci));
        }
    }
    (da, db)
}

pub fn mul_broadcast_backward<E: Element>(
    a: &Tensor<E>,
    scale: &Tensor<E>,
    dout: &Tensor<E>,
    need_a: bool,
    need_scale: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>) {
    let [n, c, _, _] = a.shape();
    let da = need_a.then(|| {
        let mut da = Tensor::zeros(a.shape());
        for ni in 0..n {
            for ci in 0..c {
                let s = scale.at(ni, ci, 0, 0);
                let g = dout.plane(ni, ci);
                for (o, &gv) in da.plane_mut(ni, ci).iter_mut().zip(g.iter()) {
                    *o = gv * s;
                }
            }
        }
        da
    });
    let ds = need_scale.then(|| {
        let mut ds = Tensor::zeros([n, c, 1, 1]);
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = E::zero();
                for (&av, &gv) in a.plane(ni, ci).iter().zip(dout.plane(ni, ci).iter()) {
                    acc = acc + av * gv;
                }
                ds.data_mut()[ni * c + ci] = acc;
            }
        }
        ds
    });
    (da, ds)
}

/// `x > 0 ? x : slope * x`; the subgradient at 0 is `slope`.
pub fn leaky_relu<E: Element>(input: &Tensor<E>, slope: E) -> Tensor<E> {
    input.map(|v| if v > E::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<E: Element>(input: &Tensor<E>, dout: &Tensor<E>, slope: E) -> Tensor<E> {
    let data = input
        .data()
        .iter()
        .zip(dout.data().iter())
        .map(|(&v, &g)| if v > E::zero() { g } else { slope * g })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape as input")
}

pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|v| if v > E::zero() { v } else { E::zero() })
}

pub fn relu_backward<E: Element>(input: &Tensor<E>, dout: &Tensor<E>) -> Tensor<E> {
    let data = input
        .data()
        .iter()
        .zip(dout.data().iter())
        .map(|(&v, &g)| if v > E::zero() { g } else { E::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape as input")
}

pub fn sigmoid<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(|v| E::one() / (E::one() + (-v).exp()))
}

/// Backward through sigmoid given its forward output.
pub fn sigmoid_backward<E: Element>(output: &Tensor<E>, dout: &Tensor<E>) -> Tensor<E> {
    let data = output
        .data()
        .iter()
        .zip(dout.data().iter())
        .map(|(&s, &g)| g * s * (E::one() - s))
        .collect();
    Tensor::new(output.shape(), data).expect("same shape as output")
}

/// Mean absolute error over all elements.
pub fn l1_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<E> {
    check_same_shape("l1_loss", pred, target)?;
    let inv = E::from_f64_val(1.0 / pred.numel() as f64);
    let mut acc = E::zero();
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        acc = acc + (p - t).abs();
    }
    Ok(acc * inv)
}

/// `d/dpred mean|pred - target|`, with `sign(0) = 0`.
pub fn l1_loss_backward<E: Element>(pred: &Tensor<E>, target: &Tensor<E>, upstream: E) -> Tensor<E> {
    let inv = E::from_f64_val(1.0 / pred.numel() as f64) * upstream;
    let data = pred
        .data()
        .iter()
        .zip(target.data().iter())
        .map(|(&p, &t)| {
            let d = p - t;
            if d > E::zero() {
                inv
            } else if d < E::zero() {
                -inv
            } else {
                E::zero()
            }
        })
        .collect();
    Tensor::new(pred.shape(), data).expect("same shape as pred")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_scalar_multiply() {
        let x = t([1, 1, 1, 1], vec![2.0]);
        let w = t([1, 1, 1, 1], vec![3.0]);
        let b = t([1, 1, 1, 1], vec![0.0]);
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let x = t([1, 1, 4, 5], (0..20).map(|i| i as f32 * 0.3 - 2.0).collect());
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let w = t([1, 1, 3, 3], wdata);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::<f32>::zeros([2, 3, 8, 8]);
        let w = Tensor::<f32>::zeros([5, 3, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), [2, 5, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 4, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "unexpected message: {msg}");
    }

    #[test]
    fn pixel_shuffle_definition_case() {
        let x = t([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_rejects_bad_channels() {
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn pixel_unshuffle_inverts_shuffle() {
        let x = t([2, 8, 3, 2], (0..96).map(|i| i as f32).collect());
        let y = pixel_shuffle(&x, 2).unwrap();
        let z = pixel_unshuffle(&y, 2).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn gap_mean() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn gap_zero_spatial_errors() {
        let x = Tensor::<f32>::zeros([1, 1, 0, 4]);
        assert!(global_avg_pool(&x).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = t([1, 1, 1, 2], vec![1.0, 0.0]);
        let b = t([1, 1, 1, 2], vec![0.0, 0.0]);
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn concat_shapes_and_split() {
        let a = Tensor::<f32>::full([1, 2, 4, 4], 1.0);
        let b = Tensor::<f32>::full([1, 3, 4, 4], 2.0);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), [1, 5, 4, 4]);
        let (da, db) = concat_channels_backward(&y, 2, 3);
        assert_eq!(da.data(), a.data());
        assert_eq!(db.data(), b.data());
    }
}
