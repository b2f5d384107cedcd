use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::linalg;
use crate::embedding::EmbeddingSet;
use crate::error::{NsaError, Result};

/// Eigenvalues below this are raised to it before the inverse square root.
pub const EIGEN_FLOOR: f64 = 1e-8;

/// Mean and symmetric whitener `W = Σ_reg^{-1/2}` of a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisTransform {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `d×d`.
    pub whitener: Vec<f64>,
    /// Row-major regularized covariance `Σ_reg`.
    pub covariance: Vec<f64>,
    /// Eigenvalues of `Σ_reg`, descending, before flooring.
    pub eigenvalues: Vec<f64>,
    pub shrinkage: f64,
}

impl MahalanobisTransform {
    /// `W(x − μ)` for every row.
    pub fn whiten(&self, set: &EmbeddingSet) -> Result<Vec<f64>> {
        self.check(set)?;
        let mut x = flat_f64(set);
        for row in x.chunks_mut(self.dim) {
            row.iter_mut().zip(&self.mean).for_each(|(v, m)| *v -= m);
        }
        Ok(linalg::matmul(&x, set.len(), &self.whitener, self.dim, self.dim))
    }

    /// `W·x` for every row, without centering.
    pub fn project(&self, set: &EmbeddingSet) -> Result<Vec<f64>> {
        self.check(set)?;
        Ok(linalg::matmul(&flat_f64(set), set.len(), &self.whitener, self.dim, self.dim))
    }

    /// `W·μ`.
    pub fn projected_mean(&self) -> Vec<f64> {
        linalg::matmul(&self.mean, 1, &self.whitener, self.dim, self.dim)
    }

    fn check(&self, set: &EmbeddingSet) -> Result<()> {
        if set.dim() != self.dim {
            return Err(NsaError::dim(format!(
                "transform fitted on d={}, embeddings have d={}",
                self.dim,
                set.dim()
            )));
        }
        Ok(())
    }
}

pub(crate) fn flat_f64(set: &EmbeddingSet) -> Vec<f64> {
    set.data().iter().map(|&v| v as f64).collect()
}

/// Fits `μ` and `W` with `Σ_reg = (1−λ)Σ + λ(tr Σ/d)I`, `Σ` the unbiased sample covariance.
pub fn fit_mahalanobis(train: &EmbeddingSet, shrinkage: f64) -> Result<MahalanobisTransform> {
    let (n, d) = (train.len(), train.dim());
    if n < 2 {
        return Err(NsaError::InsufficientSamples { needed: 2, got: n });
    }
    if d == 0 {
        return Err(NsaError::dim("cannot whiten zero-dimensional embeddings"));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(NsaError::config(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let mut x = flat_f64(train);
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in x.chunks_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    // Xᵀ X via the Gram helper on the transposed layout.
    let mut xt = vec![0.0; d * n];
    for i in 0..n {
        for j in 0..d {
            xt[j * n + i] = x[i * d + j];
        }
    }
    let mut cov = linalg::gram(&xt, d, &xt, d, n);
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Err(NsaError::Singular(format!(
            "all {n} training rows are identical, so the covariance is zero{}",
            if shrinkage == 0.0 { "; set shrinkage λ > 0 once the data varies" } else { "" }
        )));
    }
    let iso = shrinkage * trace / d as f64;
    for i in 0..d {
        for j in 0..d {
            let v = &mut cov[i * d + j];
            *v *= 1.0 - shrinkage;
            if i == j {
                *v += iso;
            }
        }
    }
    // Symmetrize against rounding before the eigensolver.
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vecs = vec![0.0; d * d]; // column k = k-th eigenvector, row-major storage
    let mut values = Vec::with_capacity(d);
    for (k, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let sign = col
            .iter()
            .find(|v| v.abs() > 1e-12)
            .map_or(1.0, |v| v.signum());
        for r in 0..d {
            vecs[r * d + k] = sign * col[r];
        }
        values.push(eig.eigenvalues[src]);
    }
    let inv_sqrt: Vec<f64> = values.iter().map(|&l| 1.0 / l.max(EIGEN_FLOOR).sqrt()).collect();
    let mut scaled = vecs.clone();
    for row in scaled.chunks_mut(d) {
        row.iter_mut().zip(&inv_sqrt).for_each(|(v, s)| *v *= s);
    }
    let mut whitener = linalg::gram(&scaled, d, &vecs, d, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (whitener[i * d + j] + whitener[j * d + i]);
            whitener[i * d + j] = s;
            whitener[j * d + i] = s;
        }
    }
    Ok(MahalanobisTransform {
        dim: d,
        mean,
        whitener,
        covariance: cov,
        eigenvalues: values,
        shrinkage,
    })
}
