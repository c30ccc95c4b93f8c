//! 3-D convolution and its transpose over `[N, C, D, H, W]` tensors.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a forward convolution `x[n, ci, D, H, W] -> y[n, co, OD, OH, OW]`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn in_plane(&self) -> usize {
        self.inp[0] * self.inp[1] * self.inp[2]
    }
    fn out_plane(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }
    fn kvol(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Output indices `o` with `0 <= o*stride + kk - pad < size`.
    #[inline]
    fn valid(&self, kk: usize, size: usize, out_size: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kk = kk as isize;
        let lo = (p - kk).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (size as isize - 1 + p - kk).div_euclid(s);
        let hi = hi.min(out_size as isize - 1);
        if hi < lo {
            0..0
        } else {
            lo as usize..hi as usize + 1
        }
    }
}

/// Visit every (input offset, output offset) pair touched by kernel tap
/// `(kd, kh, kw)`, for one input plane and one output plane.
#[inline]
fn for_each_tap(g: &Geom, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = g.inp;
    let [od, oh, ow] = g.out;
    let s = g.stride;
    let rd = g.valid(kd, d, od);
    let rh = g.valid(kh, h, oh);
    let rw = g.valid(kw, w, ow);
    if rw.is_empty() {
        return;
    }
    for z in rd {
        let iz = z * s + kd - g.pad;
        for y in rh.clone() {
            let iy = y * s + kh - g.pad;
            let in_row = (iz * h + iy) * w;
            let out_row = (z * oh + y) * ow;
            let ix0 = rw.start * s + kw - g.pad;
            f(in_row + ix0, out_row + rw.start, rw.len());
        }
    }
}

fn forward_kernel<T: Real>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let s = g.stride;
    let mut out = vec![T::zero(); g.n * g.co * op];
    for n in 0..g.n {
        for co in 0..g.co {
            let o = &mut out[(n * g.co + co) * op..(n * g.co + co + 1) * op];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.ci {
                let xin = &x[(n * g.ci + ci) * ip..(n * g.ci + ci + 1) * ip];
                let wk = &w[(co * g.ci + ci) * kv..(co * g.ci + ci + 1) * kv];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = wk[(kd * g.k + kh) * g.k + kw];
                            if wv == T::zero() {
                                continue;
                            }
                            for_each_tap(g, kd, kh, kw, |i0, o0, len| {
                                for t in 0..len {
                                    o[o0 + t] += wv * xin[i0 + t * s];
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`forward_kernel`] with respect to the input.
fn input_grad_kernel<T: Real>(g: &Geom, gout: &[T], w: &[T]) -> Vec<T> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let s = g.stride;
    let mut gin = vec![T::zero(); g.n * g.ci * ip];
    for n in 0..g.n {
        for ci in 0..g.ci {
            let gi = &mut gin[(n * g.ci + ci) * ip..(n * g.ci + ci + 1) * ip];
            for co in 0..g.co {
                let go = &gout[(n * g.co + co) * op..(n * g.co + co + 1) * op];
                let wk = &w[(co * g.ci + ci) * kv..(co * g.ci + ci + 1) * kv];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let wv = wk[(kd * g.k + kh) * g.k + kw];
                            if wv == T::zero() {
                                continue;
                            }
                            for_each_tap(g, kd, kh, kw, |i0, o0, len| {
                                for t in 0..len {
                                    gi[i0 + t * s] += wv * go[o0 + t];
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of [`forward_kernel`] with respect to the weights.
fn weight_grad_kernel<T: Real>(g: &Geom, gout: &[T], x: &[T]) -> Vec<T> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let s = g.stride;
    let mut gw = vec![T::zero(); g.co * g.ci * kv];
    for n in 0..g.n {
        for co in 0..g.co {
            let go = &gout[(n * g.co + co) * op..(n * g.co + co + 1) * op];
            for ci in 0..g.ci {
                let xin = &x[(n * g.ci + ci) * ip..(n * g.ci + ci + 1) * ip];
                let gwk = &mut gw[(co * g.ci + ci) * kv..(co * g.ci + ci + 1) * kv];
                for kd in 0..g.k {
                    for kh in 0..g.k {
                        for kw in 0..g.k {
                            let mut acc = T::zero();
                            for_each_tap(g, kd, kh, kw, |i0, o0, len| {
                                for t in 0..len {
                                    acc += go[o0 + t] * xin[i0 + t * s];
                                }
                            });
                            gwk[(kd * g.k + kh) * g.k + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    gw
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum();
        }
    }
    out
}

fn check_common(op: &'static str, input: &Tensor<impl Real>, weight: &Tensor<impl Real>, stride: usize) -> Result<()> {
    if input.shape().len() != 5 {
        return Err(Error::shape(op, "input rank", format!("expected [N,C,D,H,W], got {:?}", input.shape())));
    }
    let ws = weight.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(Error::shape(op, "weight", format!("expected cubic [C',C,k,k,k], got {ws:?}")));
    }
    if ws[2] % 2 == 0 && op == "conv3d" {
        return Err(Error::shape(op, "kernel size", format!("k must be odd, got {}", ws[2])));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::invalid(op, format!("stride must be 1 or 2, got {stride}")));
    }
    Ok(())
}

const AXES: [&str; 3] = ["D", "H", "W"];

/// Cross-correlation with cubic kernel `weight: [C', C, k, k, k]`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    check_common("conv3d", input, weight, stride)?;
    let s = input.shape();
    let ws = weight.shape();
    if ws[1] != s[1] {
        return Err(Error::shape("conv3d", "C (input channels)", format!("input has {}, weight expects {}", s[1], ws[1])));
    }
    let k = ws[2];
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = s[2 + a] + 2 * padding;
        if padded < k {
            return Err(Error::shape("conv3d", AXES[a], format!("padded extent {padded} smaller than kernel {k}")));
        }
        out[a] = (padded - k) / stride + 1;
    }
    if let Some(b) = bias {
        if b.numel() != ws[0] {
            return Err(Error::shape("conv3d", "bias", format!("expected {}, got {}", ws[0], b.numel())));
        }
    }
    let g = Geom {
        n: s[0],
        ci: s[1],
        co: ws[0],
        k,
        stride,
        pad: padding,
        inp: [s[2], s[3], s[4]],
        out,
    };
    let data = forward_kernel(&g, input.data(), weight.data(), bias.map(|b| b.data()));
    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        "conv3d",
        vec![g.n, g.co, out[0], out[1], out[2]],
        data,
        inputs,
        move |ctx| {
            let gx = ctx.needs(0).then(|| input_grad_kernel(&g, ctx.grad, ctx.inputs[1].data()));
            let gw = ctx.needs(1).then(|| weight_grad_kernel(&g, ctx.grad, ctx.inputs[0].data()));
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| channel_sums(ctx.grad, g.n, g.co, g.out_plane())));
            }
            grads
        },
    ))
}

/// Transposed convolution: the adjoint of [`conv3d`] with respect to its
/// input. `weight` has the layout of the forward convolution it transposes,
/// `[C_in, C_out, k, k, k]`. Output extent per axis is
/// `(n - 1) * stride - 2 * padding + k + output_padding`.
pub fn conv3d_transpose<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    check_common("conv3d_transpose", input, weight, stride)?;
    let s = input.shape();
    let ws = weight.shape();
    if ws[0] != s[1] {
        return Err(Error::shape("conv3d_transpose", "C (input channels)", format!("input has {}, weight expects {}", s[1], ws[0])));
    }
    if output_padding >= stride.max(1) && output_padding > 0 {
        return Err(Error::invalid("conv3d_transpose", "output_padding must be smaller than stride"));
    }
    let k = ws[2];
    let mut full = [0usize; 3];
    for a in 0..3 {
        let ext = (s[2 + a] - 1) * stride + k + output_padding;
        if ext < 2 * padding + 1 {
            return Err(Error::shape("conv3d_transpose", AXES[a], "padding removes the whole output"));
        }
        full[a] = ext - 2 * padding;
    }
    if let Some(b) = bias {
        if b.numel() != ws[1] {
            return Err(Error::shape("conv3d_transpose", "bias", format!("expected {}, got {}", ws[1], b.numel())));
        }
    }
    // Geometry of the forward convolution this op is the adjoint of.
    let g = Geom {
        n: s[0],
        ci: ws[1],
        co: ws[0],
        k,
        stride,
        pad: padding,
        inp: full,
        out: [s[2], s[3], s[4]],
    };
    let mut data = input_grad_kernel(&g, input.data(), weight.data());
    if let Some(b) = bias {
        let plane = g.in_plane();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let bv = b.data()[i % g.ci];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        "conv3d_transpose",
        vec![g.n, g.ci, full[0], full[1], full[2]],
        data,
        inputs,
        move |ctx| {
            let gx = ctx.needs(0).then(|| forward_kernel(&g, ctx.grad, ctx.inputs[1].data(), None));
            let gw = ctx.needs(1).then(|| weight_grad_kernel(&g, ctx.inputs[0].data(), ctx.grad));
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| channel_sums(ctx.grad, g.n, g.ci, g.in_plane())));
            }
            grads
        },
    ))
}
