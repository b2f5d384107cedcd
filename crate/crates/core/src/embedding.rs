use serde::{Deserialize, Serialize};

use crate::error::{NsaError, Result};

/// `N×d` matrix of feature vectors with per-row labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    n: usize,
    d: usize,
    data: Vec<f32>,
    /// Class id of each row.
    pub classes: Vec<u16>,
    /// `true` for rows that are outliers with respect to the inlier class.
    pub outlier: Vec<bool>,
    pub feature_map: String,
    pub checkpoint: String,
}

impl EmbeddingSet {
    /// Unlabeled rows (class 0, inlier).
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * d {
            return Err(NsaError::dim(format!("{} values for {n}x{d}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NsaError::config(format!("non-finite value in row {}", i / d.max(1))));
        }
        Ok(EmbeddingSet {
            n,
            d,
            data,
            classes: vec![0; n],
            outlier: vec![false; n],
            feature_map: String::new(),
            checkpoint: String::new(),
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(NsaError::dim("ragged embedding rows"));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn with_labels(mut self, classes: Vec<u16>, outlier: Vec<bool>) -> Result<Self> {
        if classes.len() != self.n || outlier.len() != self.n {
            return Err(NsaError::dim("label arrays must have one entry per row"));
        }
        self.classes = classes;
        self.outlier = outlier;
        Ok(self)
    }

    pub fn with_source(mut self, feature_map: impl Into<String>, checkpoint: impl Into<String>) -> Self {
        self.feature_map = feature_map.into();
        self.checkpoint = checkpoint.into();
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.d.max(1)).take(self.n)
    }

    /// Rows as `f64` vectors.
    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.rows()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Rows scaled to unit L2 norm in `f64`; zero rows stay zero.
    pub fn unit_rows(&self) -> Vec<Vec<f64>> {
        self.rows_f64()
            .into_iter()
            .map(|mut r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > crate::autodiff::NORM_EPS {
                    r.iter_mut().for_each(|v| *v /= n);
                }
                r
            })
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingSet {
            n: idx.len(),
            d: self.d,
            data,
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            outlier: idx.iter().map(|&i| self.outlier[i]).collect(),
            feature_map: self.feature_map.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}
