use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Generator, LatentW};
use crate::error::{Error, Result};

/// Latent edit directions, one column per direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditDirections {
    /// `q` unit vectors of length `d_w`.
    pub directions: Vec<Vec<f64>>,
    /// Matching eigenvalues of `AᵀA`, descending.
    pub eigenvalues: Vec<f64>,
}

impl EditDirections {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// `w + alpha * directions[idx]`.
    pub fn apply(&self, w: &LatentW, idx: usize, alpha: f64) -> Result<LatentW> {
        let dir = self.directions.get(idx).ok_or(Error::OutOfRange {
            index: idx,
            len: self.directions.len(),
        })?;
        if dir.len() != w.dim() {
            return Err(Error::Shape(format!("direction has {} dims, latent {}", dir.len(), w.dim())));
        }
        Ok(LatentW(w.0.iter().zip(dir).map(|(a, d)| a + alpha * d).collect()))
    }
}

/// Top-`q` eigenvectors of `AᵀA` for a row-major `rows x cols` matrix `A`.
pub fn sefa_from_matrix(a: &[f64], rows: usize, cols: usize, q: usize) -> Result<EditDirections> {
    if a.len() != rows * cols || cols == 0 {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", a.len())));
    }
    if q == 0 || q > cols {
        return Err(Error::OutOfRange { index: q, len: cols });
    }
    let m = DMatrix::from_row_slice(rows, cols, a);
    let gram = m.transpose() * &m;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut directions = Vec::with_capacity(q);
    let mut eigenvalues = Vec::with_capacity(q);
    for &i in order.iter().take(q) {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        directions.push(v);
        eigenvalues.push(eig.eigenvalues[i].max(0.0));
    }
    Ok(EditDirections { directions, eigenvalues })
}

/// Closed-form directions from the first synthesis layer, which takes `w`
/// straight in. Its stored `(d_w, out)` weight is `Aᵀ`.
pub fn sefa_directions(g: &Generator, q: usize) -> Result<EditDirections> {
    let wt = &g.synth_input.weight;
    let (d_w, out) = (wt.shape()[0], wt.shape()[1]);
    let mut a = vec![0.0; out * d_w];
    for i in 0..d_w {
        for j in 0..out {
            a[j * d_w + i] = wt.data()[i * out + j];
        }
    }
    sefa_from_matrix(&a, out, d_w, q)
}
