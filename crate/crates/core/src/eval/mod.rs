//! One-vs-all protocol: splits with pollution, AUROC and representation probes.

mod experiment;

pub use experiment::{
    data_pools, run_experiment, run_experiment_with, summarize, write_curves_csv, write_manifest, write_results_csv,
    CurveRow, ExperimentResults, ResultRow, SummaryRow,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::NORM_EPS;
use crate::data::ImageDataset;
use crate::embedding::EmbeddingSet;
use crate::error::{NsaError, Result};
use crate::scoring::{gram, normalize_rows};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub inlier_class: u16,
    /// Indices into the training pool; treated as inliers during training.
    pub train: Vec<usize>,
    /// `true` where a training row is secretly an outlier.
    pub train_outlier: Vec<bool>,
    /// Indices into the test pool.
    pub test: Vec<usize>,
    pub test_outlier: Vec<bool>,
    /// Pollution ratio in millionths, to keep the split hashable.
    pub pollution_ppm: u32,
    pub seed: u64,
}

impl EvalSplit {
    pub fn pollution(&self) -> f64 {
        self.pollution_ppm as f64 / 1e6
    }

    pub fn polluted_count(&self) -> usize {
        self.train_outlier.iter().filter(|&&o| o).count()
    }
}

/// Training set = every inlier of `train_pool`, with `round(p·|train|)` rows
/// replaced by samples drawn uniformly without replacement from the other
/// classes. The test set is the whole `test_pool`.
pub fn make_split(
    train_pool: &ImageDataset,
    test_pool: &ImageDataset,
    inlier_class: u16,
    p: f64,
    seed: u64,
) -> Result<EvalSplit> {
    if !(0.0..=0.5).contains(&p) {
        return Err(NsaError::config(format!("pollution ratio {p} outside [0, 0.5]")));
    }
    if train_pool.class_count < 2 {
        return Err(NsaError::config("one-vs-all splits need at least 2 classes"));
    }
    let mut train = train_pool.indices_of_class(inlier_class);
    if train.is_empty() {
        return Err(NsaError::config(format!("no training images of class {inlier_class}")));
    }
    let count = (p * train.len() as f64).round() as usize;
    let mut others: Vec<usize> = (0..train_pool.len())
        .filter(|&i| train_pool.labels[i] != inlier_class)
        .collect();
    if count > others.len() {
        return Err(NsaError::config(format!(
            "pollution needs {count} outliers but only {} are available",
            others.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<usize> = (0..train.len()).collect();
    slots.shuffle(&mut rng);
    others.shuffle(&mut rng);
    let mut train_outlier = vec![false; train.len()];
    for (&slot, &src) in slots.iter().take(count).zip(&others) {
        train[slot] = src;
        train_outlier[slot] = true;
    }
    let test: Vec<usize> = (0..test_pool.len()).collect();
    let test_outlier: Vec<bool> = test.iter().map(|&i| test_pool.labels[i] != inlier_class).collect();
    if !test_outlier.iter().any(|&o| o) || test_outlier.iter().all(|&o| o) {
        return Err(NsaError::config("test pool must contain both inliers and outliers"));
    }
    Ok(EvalSplit {
        inlier_class,
        train,
        train_outlier,
        test,
        test_outlier,
        pollution_ppm: (p * 1e6).round() as u32,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocResult {
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mann–Whitney AUROC with mid-ranks; `labels[i] = true` marks an outlier
/// (expected to score higher).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<AurocResult> {
    if scores.len() != labels.len() {
        return Err(NsaError::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(NsaError::UndefinedMetric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(NsaError::UndefinedMetric("AUROC needs both outliers and inliers".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the mid-rank keeps every quantity an exact integer.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += twice_mid;
            }
        }
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(AurocResult {
        auroc: u2 as f64 / (2 * n_pos * n_neg) as f64,
        n_pos,
        n_neg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Stop when the gradient's max-abs entry falls below this.
    pub tol: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.5,
            max_iters: 500,
            tol: 1e-4,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
    /// `false` when `max_iters` was reached first.
    pub converged: bool,
}

/// Multinomial logistic regression on frozen embeddings (features standardized
/// with training statistics), full-batch gradient descent, labels from `classes`.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, config: &ProbeConfig) -> Result<ProbeResult> {
    if train.dim() != test.dim() {
        return Err(NsaError::dim("probe train/test dimensions differ"));
    }
    let mut labels: Vec<u16> = train.classes.clone();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(NsaError::config("linear probe needs at least 2 classes"));
    }
    let (n, d, k) = (train.len(), train.dim(), labels.len());
    let class_of = |c: u16| labels.binary_search(&c).ok();
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    let xs = train.rows_f64();
    for r in &xs {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    for r in &xs {
        std.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let standardize = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        rows.into_iter()
            .map(|r| r.iter().zip(mean.iter().zip(&std)).map(|(v, (m, s))| (v - m) / s).collect())
            .collect()
    };
    let x = standardize(xs);
    let y: Vec<usize> = train.classes.iter().map(|&c| class_of(c).expect("train class listed")).collect();
    let mut w = vec![0.0; (d + 1) * k];
    let logits = |w: &[f64], r: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| w[d * k + c] + r.iter().enumerate().map(|(j, v)| v * w[j * k + c]).sum::<f64>())
            .collect()
    };
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iters {
        iterations = it + 1;
        let mut grad = vec![0.0; (d + 1) * k];
        for (r, &t) in x.iter().zip(&y) {
            let z = logits(&w, r);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == t { 1.0 } else { 0.0 };
                for (j, v) in r.iter().enumerate() {
                    grad[j * k + c] += g * v / n as f64;
                }
                grad[d * k + c] += g / n as f64;
            }
        }
        for j in 0..d * k {
            grad[j] += config.l2 * w[j];
        }
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < config.tol {
            converged = true;
            break;
        }
        w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= config.lr * g);
    }
    let predict = |r: &[f64]| -> u16 {
        let z = logits(&w, r);
        let best = (0..k).fold(0, |b, c| if z[c] > z[b] { c } else { b });
        labels[best]
    };
    let acc = |rows: &[Vec<f64>], truth: &[u16]| -> f64 {
        let hits = rows.iter().zip(truth).filter(|(r, &t)| predict(r) == t).count();
        hits as f64 / rows.len().max(1) as f64
    };
    let train_accuracy = acc(&x, &train.classes);
    let test_x = standardize(test.rows_f64());
    Ok(ProbeResult {
        accuracy: acc(&test_x, &test.classes),
        train_accuracy,
        iterations,
        converged,
    })
}

/// Temperature used by the weighted kNN classifier.
pub const KNN_TAU: f64 = 0.07;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub accuracy: f64,
    pub predictions: Vec<u16>,
    pub k: usize,
    /// `true` when the requested `k` exceeded the training size.
    pub clipped: bool,
}

/// Cosine kNN; each neighbor votes for its class with weight `exp(cos/τ)`.
/// Neighbor and vote ties resolve to the lower index / class id.
pub fn weighted_knn(train: &EmbeddingSet, test: &EmbeddingSet, k: usize, tau: f64) -> Result<KnnResult> {
    if k == 0 {
        return Err(NsaError::config("k must be at least 1"));
    }
    if !(tau > 0.0) {
        return Err(NsaError::config(format!("kNN temperature must be positive, got {tau}")));
    }
    if train.is_empty() {
        return Err(NsaError::InsufficientSamples { needed: 1, got: 0 });
    }
    if train.dim() != test.dim() {
        return Err(NsaError::dim("kNN train/test dimensions differ"));
    }
    let clipped = k > train.len();
    let k = k.min(train.len());
    let d = train.dim();
    let mut a: Vec<f64> = train.data().iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = test.data().iter().map(|&v| v as f64).collect();
    normalize_rows(&mut a, d, NORM_EPS);
    normalize_rows(&mut b, d, NORM_EPS);
    let n = train.len();
    let sims = gram(&b, test.len(), &a, n, d);
    let max_class = train.classes.iter().copied().max().unwrap_or(0) as usize;
    let mut predictions = Vec::with_capacity(test.len());
    let mut hits = 0;
    for q in 0..test.len() {
        let row = &sims[q * n..(q + 1) * n];
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        let mut votes = vec![0.0; max_class + 1];
        for &j in &idx[..k] {
            votes[train.classes[j] as usize] += (row[j] / tau).exp();
        }
        let best = (0..votes.len()).fold(0, |b, c| if votes[c] > votes[b] { c } else { b }) as u16;
        if best == test.classes[q] {
            hits += 1;
        }
        predictions.push(best);
    }
    Ok(KnnResult {
        accuracy: hits as f64 / test.len().max(1) as f64,
        predictions,
        k,
        clipped,
    })
}
