//! Differentiable trilinear sampling of feature maps at vertex positions.
//!
//! Every pyramid level uses the voxel-center convention in the shared
//! normalized frame: coordinate −1 is the center of the first voxel along an
//! axis and +1 the center of the last, whatever the level's resolution.
//! Points outside `[−1, 1]³` are clamped to the border.

use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::tensor::{concat, Real, Tensor};

/// Per-vertex features sampled from each pyramid level.
#[derive(Clone, Debug)]
pub struct VertexFeatures<T: Real> {
    /// `Y0..Y8`, each `[V, C_level]`.
    pub levels: Vec<Tensor<T>>,
    /// All levels side by side, `[V, ΣC]`.
    pub concat: Tensor<T>,
}

struct Corner {
    base: [usize; 3],
    step: [usize; 3],
    frac: [f64; 3],
    /// d(index)/d(coordinate) per axis, zero where clamped.
    scale: [f64; 3],
}

fn locate(p: [f64; 3], dims: [usize; 3]) -> Corner {
    let mut c = Corner {
        base: [0; 3],
        step: [0; 3],
        frac: [0.0; 3],
        scale: [0.0; 3],
    };
    for a in 0..3 {
        let n = dims[a];
        if n == 1 {
            continue;
        }
        let s = (n - 1) as f64 / 2.0;
        let raw = (p[a] + 1.0) * s;
        let hi = (n - 1) as f64;
        let idx = raw.clamp(0.0, hi);
        if raw > 0.0 && raw < hi {
            c.scale[a] = s;
        }
        let i0 = (idx.floor() as usize).min(n - 2);
        c.base[a] = i0;
        c.step[a] = 1;
        c.frac[a] = idx - i0 as f64;
    }
    c
}

/// Sample `feature: [1, C, D, H, W]` (or `[C, D, H, W]`) at `points: [V, 3]`,
/// giving `[V, C]`. Differentiable in both the feature values and the points.
pub fn trilinear_sample<T: Real>(feature: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let fs = feature.shape();
    let (c, dims) = match fs {
        [1, c, d, h, w] | [c, d, h, w] => (*c, [*d, *h, *w]),
        _ => {
            return Err(Error::shape(
                "trilinear_sample",
                "feature rank",
                format!("expected [1, C, D, H, W], got {fs:?}"),
            ))
        }
    };
    let [v, three] = points.shape() else {
        return Err(Error::shape("trilinear_sample", "points rank", format!("{:?}", points.shape())));
    };
    if *three != 3 {
        return Err(Error::shape("trilinear_sample", "points width", format!("expected 3, got {three}")));
    }
    let v = *v;
    let plane = dims[0] * dims[1] * dims[2];
    let at = move |d: usize, h: usize, w: usize| (d * dims[1] + h) * dims[2] + w;
    let corners: Vec<Corner> = points
        .data()
        .chunks_exact(3)
        .map(|q| locate([q[0].as_f64(), q[1].as_f64(), q[2].as_f64()], dims))
        .collect();
    // Corner offsets and trilinear weights for one sample.
    let stencil = move |k: &Corner| {
        let mut out = [(0usize, 0.0f64); 8];
        for (m, slot) in out.iter_mut().enumerate() {
            let bits = [m >> 2 & 1, m >> 1 & 1, m & 1];
            let mut wgt = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = k.base[a] + bits[a] * k.step[a];
                wgt *= if bits[a] == 1 { k.frac[a] } else { 1.0 - k.frac[a] };
            }
            *slot = (at(idx[0], idx[1], idx[2]), wgt);
        }
        out
    };
    let f = feature.data();
    let mut out = vec![T::zero(); v * c];
    for (i, k) in corners.iter().enumerate() {
        let st = stencil(k);
        for ch in 0..c {
            let chan = &f[ch * plane..(ch + 1) * plane];
            let mut acc = 0.0;
            for &(o, w) in &st {
                acc += w * chan[o].as_f64();
            }
            out[i * c + ch] = T::from_real(acc);
        }
    }
    Ok(Tensor::from_op(
        "trilinear_sample",
        vec![v, c],
        out,
        vec![feature.clone(), points.clone()],
        move |ctx| {
            let gf = ctx.needs(0).then(|| {
                let mut g = vec![T::zero(); c * plane];
                for (i, k) in corners.iter().enumerate() {
                    let st = stencil(k);
                    for ch in 0..c {
                        let go = ctx.grad[i * c + ch].as_f64();
                        if go == 0.0 {
                            continue;
                        }
                        for &(o, w) in &st {
                            g[ch * plane + o] += T::from_real(w * go);
                        }
                    }
                }
                g
            });
            let gp = ctx.needs(1).then(|| {
                let f = ctx.inputs[0].data();
                let mut g = vec![T::zero(); v * 3];
                for (i, k) in corners.iter().enumerate() {
                    for a in 0..3 {
                        if k.scale[a] == 0.0 {
                            continue;
                        }
                        // Derivative of the weights with respect to frac[a].
                        let mut dst = [(0usize, 0.0f64); 8];
                        for (m, slot) in dst.iter_mut().enumerate() {
                            let bits = [m >> 2 & 1, m >> 1 & 1, m & 1];
                            let mut wgt = 1.0;
                            let mut idx = [0usize; 3];
                            for b in 0..3 {
                                idx[b] = k.base[b] + bits[b] * k.step[b];
                                wgt *= match (b == a, bits[b]) {
                                    (true, 1) => 1.0,
                                    (true, _) => -1.0,
                                    (false, 1) => k.frac[b],
                                    (false, _) => 1.0 - k.frac[b],
                                };
                            }
                            *slot = (at(idx[0], idx[1], idx[2]), wgt);
                        }
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let go = ctx.grad[i * c + ch].as_f64();
                            let chan = &f[ch * plane..(ch + 1) * plane];
                            let mut dv = 0.0;
                            for &(o, w) in &dst {
                                dv += w * chan[o].as_f64();
                            }
                            acc += go * dv;
                        }
                        g[i * 3 + a] = T::from_real(acc * k.scale[a]);
                    }
                }
                g
            });
            vec![gf, gp]
        },
    ))
}

/// Sample every pyramid level at `points` and concatenate in order X0→X8.
pub fn map_pyramid<T: Real>(pyr: &FeaturePyramid<T>, points: &Tensor<T>) -> Result<VertexFeatures<T>> {
    let levels = pyr
        .maps
        .iter()
        .map(|m| trilinear_sample(m, points))
        .collect::<Result<Vec<_>>>()?;
    let concat = concat(&levels, 1)?;
    Ok(VertexFeatures { levels, concat })
}
