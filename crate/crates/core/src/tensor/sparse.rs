use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Fixed (non-trainable) sparse matrix in canonical row-major triplet form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSparse", into = "RawSparse")]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Arc<Vec<(usize, usize, f64)>>,
    /// `row_ptr[r]..row_ptr[r + 1]` indexes the entries of row `r`.
    row_ptr: Arc<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawSparse {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TryFrom<RawSparse> for SparseMatrix {
    type Error = Error;
    fn try_from(r: RawSparse) -> Result<Self> {
        SparseMatrix::from_triplets(r.rows, r.cols, r.entries)
    }
}

impl From<SparseMatrix> for RawSparse {
    fn from(m: SparseMatrix) -> Self {
        RawSparse {
            rows: m.rows,
            cols: m.cols,
            entries: m.entries.as_ref().clone(),
        }
    }
}

impl SparseMatrix {
    /// Build from arbitrary triplets. Entries are sorted row-major and
    /// duplicate `(row, col)` pairs are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::shape(
                "sparse",
                "index",
                format!("entry ({r}, {c}) outside {rows}x{cols}"),
            ));
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &merged {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            entries: Arc::new(merged),
            row_ptr: Arc::new(row_ptr),
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect()).expect("in range")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn row(&self, r: usize) -> &[(usize, usize, f64)] {
        &self.entries[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r)
            .binary_search_by(|e| e.1.cmp(&c))
            .map(|i| self.row(r)[i].2)
            .unwrap_or(0.0)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().map(|e| e.2).sum()).collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        SparseMatrix::from_triplets(self.cols, self.rows, self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect())
            .expect("transpose stays in range")
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for &(r, c, v) in self.entries.iter() {
            d[r * self.cols + c] = v;
        }
        d
    }

    /// Product with a row-major `[cols, width]` array.
    pub fn apply<T: Real>(&self, x: &[T], width: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * width];
        for r in 0..self.rows {
            let o = &mut out[r * width..(r + 1) * width];
            for &(_, c, v) in self.row(r) {
                let v = T::from_real(v);
                for (a, &b) in o.iter_mut().zip(&x[c * width..(c + 1) * width]) {
                    *a += v * b;
                }
            }
        }
        out
    }

    /// Product of the transpose with a row-major `[rows, width]` array.
    pub fn apply_transpose<T: Real>(&self, g: &[T], width: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols * width];
        for &(r, c, v) in self.entries.iter() {
            let v = T::from_real(v);
            for k in 0..width {
                out[c * width + k] += v * g[r * width + k];
            }
        }
        out
    }
}

/// `m · x` for `x: [m.cols, F]`; differentiable with respect to `x` only.
pub fn sparse_matmul<T: Real>(m: &SparseMatrix, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, width) = x.as_matrix("sparse_matmul")?;
    if x.shape().len() != 2 || rows != m.cols() {
        return Err(Error::shape(
            "sparse_matmul",
            "rows",
            format!("matrix is {}x{}, operand {:?}", m.rows(), m.cols(), x.shape()),
        ));
    }
    let data = m.apply(x.data(), width);
    let m = m.clone();
    Ok(Tensor::from_op(
        "sparse_matmul",
        vec![m.rows(), width],
        data,
        vec![x.clone()],
        move |ctx| vec![Some(m.apply_transpose(ctx.grad, width))],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_and_merge() {
        let m = SparseMatrix::from_triplets(2, 3, vec![(1, 0, 1.0), (0, 2, 2.0), (0, 1, 3.0), (0, 2, 0.5)]).unwrap();
        assert_eq!(m.entries(), &[(0, 1, 3.0), (0, 2, 2.5), (1, 0, 1.0)]);
        assert_eq!(m.get(0, 2), 2.5);
        assert_eq!(m.get(1, 2), 0.0);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn identity_is_noop() {
        let x = Tensor::<f64>::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = sparse_matmul(&SparseMatrix::identity(3), &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn serde_roundtrip_keeps_canonical_form() {
        let m = SparseMatrix::from_triplets(3, 3, vec![(2, 1, 0.5), (0, 0, 1.0)]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: SparseMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
