use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel normalization of a `[N, C, ...]` tensor.
///
/// In train mode the batch statistics (over `N` and all trailing axes) are
/// used and the running statistics are updated; in eval mode the running
/// statistics are used as constants.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: NormMode,
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() < 2 {
        return Err(Error::shape("batchnorm", "rank", format!("expected [N, C, ...], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    if gamma.numel() != c || beta.numel() != c || state.running_mean.len() != c {
        return Err(Error::shape(
            "batchnorm",
            "C",
            format!("input has {c} channels, gamma {} beta {} state {}", gamma.numel(), beta.numel(), state.running_mean.len()),
        ));
    }
    let x = input.data();
    let count = n * plane;
    let eps = T::from_real(state.eps);
    let idx = move |b: usize, ch: usize| (b * c + ch) * plane;

    let (mean, inv_std) = match mode {
        NormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for b in 0..n {
                    acc += x[idx(b, ch)..idx(b, ch) + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = acc / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    sq += x[idx(b, ch)..idx(b, ch) + plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = T::from_real(m);
                var[ch] = T::from_real(sq / count as f64);
                let unbiased = if count > 1 { sq / (count - 1) as f64 } else { sq };
                let mom = state.momentum;
                state.running_mean[ch] = T::from_real((1.0 - mom) * state.running_mean[ch].as_f64() + mom * m);
                state.running_var[ch] = T::from_real((1.0 - mom) * state.running_var[ch].as_f64() + mom * unbiased);
            }
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
            (mean, inv)
        }
        NormMode::Eval => (
            state.running_mean.clone(),
            state.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
        ),
    };

    let (gd, bd) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = idx(b, ch);
            for i in o..o + plane {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gd[ch] * h + bd[ch];
            }
        }
    }

    Ok(Tensor::from_op(
        "batchnorm",
        s.to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |ctx| {
            let g = ctx.grad;
            let gamma = ctx.inputs[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let o = idx(b, ch);
                    for i in o..o + plane {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            let gx = ctx.needs(0).then(|| {
                let mut gx = vec![T::zero(); g.len()];
                let m = T::from_real(count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let o = idx(b, ch);
                        let scale = gamma[ch] * inv_std[ch];
                        for i in o..o + plane {
                            gx[i] = match mode {
                                NormMode::Train => scale * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m),
                                NormMode::Eval => scale * g[i],
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, ctx.needs(1).then(|| sum_gx.clone()), ctx.needs(2).then(|| sum_g.clone())]
        },
    ))
}
