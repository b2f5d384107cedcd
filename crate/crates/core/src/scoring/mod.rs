//! Anomaly scores over embeddings. Every score is oriented so that larger
//! means more anomalous.

mod linalg;
mod mahalanobis;

pub use mahalanobis::{fit_mahalanobis, MahalanobisTransform, EIGEN_FLOOR};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::NORM_EPS;
use crate::embedding::EmbeddingSet;
use crate::error::{NsaError, Result};
use mahalanobis::flat_f64;

pub(crate) use linalg::{gram, log_sum_exp, median_pairwise_distance, normalize_rows, sq_dists};

/// Default covariance shrinkage.
pub const DEFAULT_SHRINKAGE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "kCos")]
    KCos,
    #[serde(rename = "kCosMah")]
    KCosMah,
    #[serde(rename = "cCos")]
    CCos,
    #[serde(rename = "cCosMah")]
    CCosMah,
    #[serde(rename = "GDE")]
    Gde,
    Ens,
}

impl Metric {
    pub const SINGLE: [Metric; 5] = [Metric::KCos, Metric::KCosMah, Metric::CCos, Metric::CCosMah, Metric::Gde];

    pub fn uses_whitening(self) -> bool {
        matches!(self, Metric::KCosMah | Metric::CCosMah)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::KCos => "kCos",
            Metric::KCosMah => "kCosMah",
            Metric::CCos => "cCos",
            Metric::CCosMah => "cCosMah",
            Metric::Gde => "GDE",
            Metric::Ens => "Ens",
        })
    }
}

impl FromStr for Metric {
    type Err = NsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kcos" => Ok(Metric::KCos),
            "kcosmah" => Ok(Metric::KCosMah),
            "ccos" => Ok(Metric::CCos),
            "ccosmah" => Ok(Metric::CCosMah),
            "gde" => Ok(Metric::Gde),
            "ens" => Ok(Metric::Ens),
            _ => Err(NsaError::config(format!("unknown metric `{s}`"))),
        }
    }
}

impl Serialize for MetricKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}@{}", self.metric, self.feature_map))
    }
}

/// `(feature map, metric)` pair identifying a report.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MetricKey {
    pub feature_map: String,
    pub metric: Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub feature_map: String,
    pub metric: Metric,
    /// One score per query row.
    pub scores: Vec<f64>,
    /// Scores of the training rows (leave-one-out for nearest-neighbor and
    /// density metrics); their range drives ensembling.
    pub train_scores: Vec<f64>,
    pub train_min: f64,
    pub train_max: f64,
    /// Query rows whose (whitened) vector had zero norm.
    pub flagged: Vec<usize>,
}

impl ScoreReport {
    fn new(feature_map: &str, metric: Metric, scores: Vec<f64>, train_scores: Vec<f64>, flagged: Vec<usize>) -> Self {
        let train_min = train_scores.iter().copied().fold(f64::INFINITY, f64::min);
        let train_max = train_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ScoreReport {
            feature_map: feature_map.to_string(),
            metric,
            scores,
            train_scores,
            train_min,
            train_max,
            flagged,
        }
    }

    pub fn key(&self) -> MetricKey {
        MetricKey {
            feature_map: self.feature_map.clone(),
            metric: self.metric,
        }
    }
}

fn unit(rows: &mut [f64], d: usize) -> Vec<usize> {
    normalize_rows(rows, d, NORM_EPS)
}

fn angle(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos()
}

fn check_pair(train: &EmbeddingSet, query: &EmbeddingSet) -> Result<()> {
    if train.is_empty() {
        return Err(NsaError::InsufficientSamples { needed: 1, got: 0 });
    }
    if train.dim() != query.dim() {
        return Err(NsaError::dim(format!("train d={} vs query d={}", train.dim(), query.dim())));
    }
    Ok(())
}

/// Nearest-neighbor angular distance `arccos(max_m cos(u_m, v))`, in
/// Mahalanobis space (`W(x−μ)`) when a transform is given.
pub fn score_kcos(train: &EmbeddingSet, query: &EmbeddingSet, transform: Option<&MahalanobisTransform>) -> Result<ScoreReport> {
    check_pair(train, query)?;
    let d = train.dim();
    let (mut u, mut v) = match transform {
        Some(t) => (t.whiten(train)?, t.whiten(query)?),
        None => (flat_f64(train), flat_f64(query)),
    };
    unit(&mut u, d);
    let flagged = unit(&mut v, d);
    let (n, q) = (train.len(), query.len());
    let s = gram(&v, q, &u, n, d);
    let scores = (0..q)
        .map(|i| angle(s[i * n..(i + 1) * n].iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        .collect();
    let train_scores = if n < 2 {
        vec![0.0]
    } else {
        let s = gram(&u, n, &u, n, d);
        (0..n)
            .map(|i| {
                let best = (0..n).filter(|&j| j != i).map(|j| s[i * n + j]).fold(f64::NEG_INFINITY, f64::max);
                angle(best)
            })
            .collect()
    };
    let metric = if transform.is_some() { Metric::KCosMah } else { Metric::KCos };
    Ok(ScoreReport::new(&train.feature_map, metric, scores, train_scores, flagged))
}

/// Angular distance to the training mean direction. With a transform both the
/// mean and the query are projected by `W` (uncentered: centering would send
/// the mean to the origin).
pub fn score_ccos(train: &EmbeddingSet, query: &EmbeddingSet, transform: Option<&MahalanobisTransform>) -> Result<ScoreReport> {
    check_pair(train, query)?;
    let d = train.dim();
    let (mut reference, mut tx, mut qx) = match transform {
        Some(t) => (t.projected_mean(), t.project(train)?, t.project(query)?),
        None => {
            let tx = flat_f64(train);
            let mut mean = vec![0.0; d];
            for row in tx.chunks(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= train.len() as f64);
            (mean, tx, flat_f64(query))
        }
    };
    if !unit(&mut reference, d).is_empty() {
        return Err(NsaError::UndefinedMetric(format!(
            "training mean of `{}` is the zero vector; c-Cos has no reference direction",
            train.feature_map
        )));
    }
    unit(&mut tx, d);
    let flagged = unit(&mut qx, d);
    let cos = |rows: &[f64]| -> Vec<f64> {
        rows.chunks(d)
            .map(|r| angle(r.iter().zip(&reference).map(|(a, b)| a * b).sum()))
            .collect()
    };
    let metric = if transform.is_some() { Metric::CCosMah } else { Metric::CCos };
    Ok(ScoreReport::new(&train.feature_map, metric, cos(&qx), cos(&tx), flagged))
}

/// Bandwidth picked by the median heuristic: median pairwise training distance / √2.
pub fn gde_auto_bandwidth(train: &EmbeddingSet) -> f64 {
    median_pairwise_distance(&flat_f64(train), train.len(), train.dim()) / std::f64::consts::SQRT_2
}

/// Negative log of the (unnormalized) Gaussian KDE, `−log mean_m exp(−‖y−x_m‖²/2σ²)`.
pub fn score_gde(train: &EmbeddingSet, query: &EmbeddingSet, bandwidth: Option<f64>) -> Result<ScoreReport> {
    check_pair(train, query)?;
    let sigma = match bandwidth {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(NsaError::config(format!("GDE bandwidth must be positive, got {s}"))),
        None => {
            if train.len() < 2 {
                return Err(NsaError::config("automatic GDE bandwidth needs at least 2 training points"));
            }
            let s = gde_auto_bandwidth(train);
            if s <= 0.0 {
                return Err(NsaError::config("training points coincide; automatic GDE bandwidth is 0"));
            }
            s
        }
    };
    let (n, d) = (train.len(), train.dim());
    let tx = flat_f64(train);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let score = |d2: &[f64], skip: Option<usize>| -> f64 {
        let terms = d2.iter().enumerate().filter(move |(j, _)| Some(*j) != skip).map(move |(_, &v)| -v * inv);
        let count = if skip.is_some() { n - 1 } else { n };
        (count as f64).ln() - log_sum_exp(terms)
    };
    let dq = sq_dists(&flat_f64(query), query.len(), &tx, n, d);
    let scores = dq.chunks(n).map(|r| score(r, None)).collect();
    let train_scores = if n < 2 {
        vec![0.0]
    } else {
        let dt = sq_dists(&tx, n, &tx, n, d);
        dt.chunks(n).enumerate().map(|(i, r)| score(r, Some(i))).collect()
    };
    Ok(ScoreReport::new(&train.feature_map, Metric::Gde, scores, train_scores, Vec::new()))
}

/// Scores `query` against `train` with one single-map metric.
pub fn score_metric(
    train: &EmbeddingSet,
    query: &EmbeddingSet,
    metric: Metric,
    transform: Option<&MahalanobisTransform>,
    gde_bandwidth: Option<f64>,
) -> Result<ScoreReport> {
    let need = || NsaError::config(format!("{metric} needs a fitted Mahalanobis transform"));
    match metric {
        Metric::KCos => score_kcos(train, query, None),
        Metric::KCosMah => score_kcos(train, query, Some(transform.ok_or_else(need)?)),
        Metric::CCos => score_ccos(train, query, None),
        Metric::CCosMah => score_ccos(train, query, Some(transform.ok_or_else(need)?)),
        Metric::Gde => score_gde(train, query, gde_bandwidth),
        Metric::Ens => Err(NsaError::config("Ens is a combination; use ensemble()")),
    }
}

/// Min-max normalizes each report by its training range (no clipping) and sums.
pub fn ensemble(reports: &[ScoreReport]) -> Result<ScoreReport> {
    let first = reports.first().ok_or_else(|| NsaError::config("ensemble needs at least one report"))?;
    let (q, n) = (first.scores.len(), first.train_scores.len());
    let mut scores = vec![0.0; q];
    let mut train_scores = vec![0.0; n];
    let mut flagged = Vec::new();
    for r in reports {
        if r.scores.len() != q || r.train_scores.len() != n {
            return Err(NsaError::dim(format!(
                "report {}@{} has {}/{} scores, expected {q}/{n}",
                r.metric,
                r.feature_map,
                r.scores.len(),
                r.train_scores.len()
            )));
        }
        let range = r.train_max - r.train_min;
        if !(range > 0.0) {
            return Err(NsaError::DegenerateRange {
                feature_map: r.feature_map.clone(),
                metric: r.metric.to_string(),
                value: r.train_min,
            });
        }
        for (acc, s) in scores.iter_mut().zip(&r.scores) {
            *acc += (s - r.train_min) / range;
        }
        for (acc, s) in train_scores.iter_mut().zip(&r.train_scores) {
            *acc += (s - r.train_min) / range;
        }
        flagged.extend(&r.flagged);
    }
    flagged.sort_unstable();
    flagged.dedup();
    let name = reports.iter().map(|r| format!("{}@{}", r.metric, r.feature_map)).collect::<Vec<_>>().join("+");
    Ok(ScoreReport::new(&name, Metric::Ens, scores, train_scores, flagged))
}

/// Metrics the `Ens.` preset applies to a map: the nearest-neighbor pair on
/// flattened spatial maps, the mean-direction pair on vector maps.
pub fn ensemble_metrics(spatial: bool) -> [Metric; 2] {
    if spatial {
        [Metric::KCos, Metric::KCosMah]
    } else {
        [Metric::CCos, Metric::CCosMah]
    }
}

/// CSV `sample_id,feature_map,metric,score`.
pub fn write_score_csv(reports: &[ScoreReport], w: &mut impl Write) -> Result<()> {
    writeln!(w, "sample_id,feature_map,metric,score")?;
    for r in reports {
        for (i, s) in r.scores.iter().enumerate() {
            writeln!(w, "{i},{},{},{s:.12e}", r.feature_map, r.metric)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RangeEntry {
    min: f64,
    max: f64,
    flagged: usize,
}

/// JSON sidecar: training min/max per `metric@feature_map`.
pub fn write_score_sidecar(reports: &[ScoreReport], w: &mut impl Write) -> Result<()> {
    let map: BTreeMap<String, RangeEntry> = reports
        .iter()
        .map(|r| {
            (
                format!("{}@{}", r.metric, r.feature_map),
                RangeEntry {
                    min: r.train_min,
                    max: r.train_max,
                    flagged: r.flagged.len(),
                },
            )
        })
        .collect();
    serde_json::to_writer_pretty(&mut *w, &map)?;
    writeln!(w)?;
    Ok(())
}
