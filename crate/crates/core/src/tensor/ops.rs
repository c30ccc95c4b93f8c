//! Elementwise, reduction, and shape operations.

use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "operand",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                let neg = ctx.needs(1).then(|| ctx.grad.iter().map(|&g| -g).collect());
                vec![Some(ctx.grad.to_vec()), neg]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs(0).then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect());
                let gb = ctx.needs(1).then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let s = T::from_real(factor);
        let data = self.data().iter().map(|&a| a * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            vec![Some(ctx.grad.iter().map(|&g| g * s).collect())]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            let x = ctx.inputs[0].data();
            vec![Some(
                ctx.grad
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    pub fn square(&self) -> Tensor<T> {
        let data = self.data().iter().map(|&a| a * a).collect();
        Tensor::from_op("square", self.shape().to_vec(), data, vec![self.clone()], |ctx| {
            let two = T::one() + T::one();
            let x = ctx.inputs[0].data();
            vec![Some(ctx.grad.iter().zip(x).map(|(&g, &v)| two * g * v).collect())]
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Same data viewed with a different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                "element count",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        ))
    }

    /// `[M, F] + bias[F]`, broadcast over rows.
    pub fn add_row_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, cols) = self.as_matrix("add_row_bias")?;
        if bias.numel() != cols {
            return Err(Error::shape(
                "add_row_bias",
                "bias length",
                format!("expected {cols}, got {}", bias.numel()),
            ));
        }
        let b = bias.data();
        let mut data = self.data().to_vec();
        for r in 0..rows {
            for (v, &bb) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(Tensor::from_op(
            "add_row_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |ctx| {
                let gb = ctx.needs(1).then(|| {
                    let mut gb = vec![T::zero(); cols];
                    for row in ctx.grad.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    gb
                });
                vec![Some(ctx.grad.to_vec()), gb]
            },
        ))
    }

    /// Rows `index[i]` of a `[M, F]` tensor, stacked into `[len(index), F]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<T>> {
        let (rows, cols) = self.as_matrix("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", "row index", format!("{bad} >= {rows}")));
        }
        if index.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index"));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let index = index.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![index.len(), cols],
            data,
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![T::zero(); rows * cols];
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        g[i * cols + c] += ctx.grad[k * cols + c];
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Sum over the last axis of a `[M, F]` tensor, giving `[M]`.
    pub fn sum_rows(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.as_matrix("sum_rows")?;
        let data = self.data().chunks_exact(cols).map(|r| r.iter().copied().sum()).collect();
        Ok(Tensor::from_op("sum_rows", vec![rows], data, vec![self.clone()], move |ctx| {
            let mut g = Vec::with_capacity(rows * cols);
            for &gr in ctx.grad {
                g.extend(std::iter::repeat_n(gr, cols));
            }
            vec![Some(g)]
        }))
    }

    /// Interpret as a 2-D matrix `[rows, cols]`; rank-1 tensors are one row.
    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, "rank", format!("expected rank 2, got {s:?}"))),
        }
    }
}

/// `x · Wᵀ + b` with `x: [M, K]`, `weight: [N, K]`, `bias: [N]`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, k) = x.as_matrix("linear")?;
    let [n, wk] = weight.shape() else {
        return Err(Error::shape("linear", "weight rank", format!("{:?}", weight.shape())));
    };
    let (n, wk) = (*n, *wk);
    if wk != k {
        return Err(Error::shape(
            "linear",
            "in_features",
            format!("input has {k}, weight expects {wk}"),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != n {
            return Err(Error::shape("linear", "bias", format!("expected {n}, got {}", b.numel())));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let xr = &xd[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let wr = &wd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&a, &b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *o = acc;
        }
        if let Some(b) = bias {
            orow.iter_mut().zip(b.data()).for_each(|(o, &bb)| *o += bb);
        }
    }
    let out_shape = if x.shape().len() == 1 { vec![n] } else { vec![m, n] };
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op("linear", out_shape, out, inputs, move |ctx| {
        let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let gx = ctx.needs(0).then(|| {
            let mut gx = vec![T::zero(); m * k];
            for i in 0..m {
                let gxr = &mut gx[i * k..(i + 1) * k];
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == T::zero() {
                        continue;
                    }
                    for (a, &w) in gxr.iter_mut().zip(&wd[j * k..(j + 1) * k]) {
                        *a += gij * w;
                    }
                }
            }
            gx
        });
        let gw = ctx.needs(1).then(|| {
            let mut gw = vec![T::zero(); n * k];
            for i in 0..m {
                let xr = &xd[i * k..(i + 1) * k];
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == T::zero() {
                        continue;
                    }
                    for (a, &xv) in gw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                        *a += gij * xv;
                    }
                }
            }
            gw
        });
        let mut grads = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs(2).then(|| {
                let mut gb = vec![T::zero(); n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                gb
            }));
        }
        grads
    }))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Real>(tensors: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::invalid("concat", "no tensors"))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::shape("concat", "axis", format!("axis {axis} for rank {rank}")));
    }
    for t in tensors {
        let s = t.shape();
        if s.len() != rank || s.iter().enumerate().any(|(d, &e)| d != axis && e != first.shape()[d]) {
            return Err(Error::shape(
                "concat",
                format!("dim != {axis}"),
                format!("{:?} vs {:?}", first.shape(), s),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
    let total_width: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(outer * total_width);
    for o in 0..outer {
        for (t, &w) in tensors.iter().zip(&widths) {
            data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    Ok(Tensor::from_op("concat", shape, data, tensors.to_vec(), move |ctx| {
        let mut grads: Vec<Option<Vec<T>>> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ctx.needs(i).then(|| Vec::with_capacity(outer * w)))
            .collect();
        for o in 0..outer {
            let mut off = o * total_width;
            for (g, &w) in grads.iter_mut().zip(&widths) {
                if let Some(g) = g {
                    g.extend_from_slice(&ctx.grad[off..off + w]);
                }
                off += w;
            }
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_identity_weight() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.5]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::new(&[3, 3], eye).unwrap();
        let b = Tensor::zeros(&[3]);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_rejects_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let w = Tensor::<f64>::zeros(&[4, 2]);
        match linear(&x, &w, None) {
            Err(Error::Shape { dim, .. }) => assert_eq!(dim, "in_features"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concat_middle_axis() {
        let a = Tensor::<f64>::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(&[2, 2, 2], (5..13).map(f64::from).collect()).unwrap();
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
    }

    #[test]
    fn gather_rows_scatters_grad() {
        let x = Tensor::<f64>::parameter(&[3, 2], vec![0.0; 6]).unwrap();
        x.gather_rows(&[2, 0, 2]).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
