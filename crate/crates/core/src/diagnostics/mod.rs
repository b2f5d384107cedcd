//! Compactness diagnostics: vMF concentration and MMD against the uniform sphere.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{NsaError, Result};
use crate::scoring::{median_pairwise_distance, sq_dists};

/// Cap applied to the concentration estimate of (numerically) collapsed sets.
pub const KAPPA_MAX: f64 = 1e6;
const MIN_VMF_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmfFit {
    pub mean_direction: Vec<f64>,
    pub kappa: f64,
    pub rbar: f64,
}

/// Banerjee et al. closed-form estimate `r̄(d − r̄²)/(1 − r̄²)`, capped at [`KAPPA_MAX`].
pub fn banerjee_kappa(rbar: f64, d: usize) -> f64 {
    let d = d as f64;
    if rbar <= 0.0 {
        return 0.0;
    }
    let denom = 1.0 - rbar * rbar;
    if denom <= 0.0 {
        return KAPPA_MAX;
    }
    (rbar * (d - rbar * rbar) / denom).min(KAPPA_MAX)
}

/// Fits a von Mises–Fisher distribution to the L2-normalized rows.
pub fn fit_vmf(set: &EmbeddingSet) -> Result<VmfFit> {
    if set.len() < MIN_VMF_SAMPLES {
        return Err(NsaError::InsufficientSamples {
            needed: MIN_VMF_SAMPLES,
            got: set.len(),
        });
    }
    let d = set.dim();
    if d < 2 {
        return Err(NsaError::dim("vMF fitting needs d >= 2"));
    }
    let mut resultant = vec![0.0; d];
    for row in set.unit_rows() {
        resultant.iter_mut().zip(&row).for_each(|(s, v)| *s += v);
    }
    let norm = resultant.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rbar = (norm / set.len() as f64).min(1.0);
    let mean_direction = if norm > 0.0 {
        resultant.iter().map(|v| v / norm).collect()
    } else {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    };
    Ok(VmfFit {
        mean_direction,
        kappa: banerjee_kappa(rbar, d),
        rbar,
    })
}

fn gaussian_unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `n` i.i.d. points uniform on `S^{d−1}` (normalized Gaussians).
pub fn sample_uniform_sphere(n: usize, d: usize, seed: u64) -> Result<EmbeddingSet> {
    if d < 2 {
        return Err(NsaError::config("uniform sphere sampling needs d >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_unit(d, &mut rng)).collect();
    if n == 0 {
        return EmbeddingSet::new(0, d, Vec::new());
    }
    EmbeddingSet::from_f64_rows(&rows)
}

/// `n` draws from vMF(`mu`, `kappa`) with Wood's (1994) rejection sampler.
pub fn sample_vmf(n: usize, mu: &[f64], kappa: f64, seed: u64) -> Result<EmbeddingSet> {
    let d = mu.len();
    if d < 2 {
        return Err(NsaError::config("vMF sampling needs d >= 2"));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(NsaError::config(format!("kappa must be finite and >= 0, got {kappa}")));
    }
    let mu_norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
    if mu_norm <= 0.0 {
        return Err(NsaError::config("vMF mean direction must be nonzero"));
    }
    let mu: Vec<f64> = mu.iter().map(|v| v / mu_norm).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).map_err(|e| NsaError::config(e.to_string()))?;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(&mut rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        // Tangent direction orthogonal to mu.
        let v = loop {
            let g = gaussian_unit(d, &mut rng);
            let dot: f64 = g.iter().zip(&mu).map(|(a, b)| a * b).sum();
            let t: Vec<f64> = g.iter().zip(&mu).map(|(a, b)| a - dot * b).collect();
            let n = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                break t.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        rows.push(mu.iter().zip(&v).map(|(m, t)| w * m + s * t).collect::<Vec<f64>>());
    }
    if n == 0 {
        return EmbeddingSet::new(0, d, Vec::new());
    }
    EmbeddingSet::from_f64_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Unbiased estimate of MMD².
    pub mmd2: f64,
    pub bandwidth: f64,
    pub n_x: usize,
    pub n_y: usize,
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

/// Unbiased MMD² between the L2-normalized rows of `x` and `y` with an RBF
/// kernel. Without a bandwidth, σ is the median pairwise distance of the pooled set.
pub fn mmd(x: &EmbeddingSet, y: &EmbeddingSet, bandwidth: Option<f64>) -> Result<MmdResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(NsaError::InsufficientSamples {
            needed: 2,
            got: x.len().min(y.len()),
        });
    }
    if x.dim() != y.dim() {
        return Err(NsaError::dim(format!("MMD between d={} and d={}", x.dim(), y.dim())));
    }
    let d = x.dim();
    let (xs, ys) = (flat(&x.unit_rows()), flat(&y.unit_rows()));
    let sigma = match bandwidth {
        Some(s) => s,
        None => {
            let mut pooled = xs.clone();
            pooled.extend_from_slice(&ys);
            median_pairwise_distance(&pooled, x.len() + y.len(), d)
        }
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(NsaError::DegenerateKernel(format!("RBF bandwidth is {sigma}")));
    }
    Ok(MmdResult {
        mmd2: mmd2_unbiased(&xs, x.len(), &ys, y.len(), d, sigma),
        bandwidth: sigma,
        n_x: x.len(),
        n_y: y.len(),
    })
}

fn kernel_mean(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize, sigma: f64, same: bool) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let d2 = sq_dists(a, na, b, nb, d);
    let mut s = 0.0;
    for i in 0..na {
        for j in 0..nb {
            if !(same && i == j) {
                s += (-d2[i * nb + j] * inv).exp();
            }
        }
    }
    let count = if same { na * (na - 1) } else { na * nb };
    s / count as f64
}

fn mmd2_unbiased(xs: &[f64], nx: usize, ys: &[f64], ny: usize, d: usize, sigma: f64) -> f64 {
    kernel_mean(xs, nx, xs, nx, d, sigma, true) + kernel_mean(ys, ny, ys, ny, d, sigma, true)
        - 2.0 * kernel_mean(xs, nx, ys, ny, d, sigma, false)
}

/// Standard deviation of the unbiased MMD² under random relabelings of the pooled sample.
pub fn mmd_permutation_std(x: &EmbeddingSet, y: &EmbeddingSet, bandwidth: f64, permutations: usize, seed: u64) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(NsaError::dim("MMD inputs differ in dimension"));
    }
    if permutations < 2 {
        return Err(NsaError::config("need at least 2 permutations"));
    }
    let d = x.dim();
    let mut pooled = x.unit_rows();
    pooled.extend(y.unit_rows());
    let nx = x.len();
    let n = pooled.len();
    // Precompute the pooled kernel once; each permutation only re-partitions it.
    let p = flat(&pooled);
    let d2 = sq_dists(&p, n, &p, n, d);
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let k: Vec<f64> = d2.iter().map(|v| (-v * inv).exp()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut values = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let (a, b) = idx.split_at(nx);
        let within = |s: &[usize]| -> f64 {
            let mut t = 0.0;
            for (ii, &i) in s.iter().enumerate() {
                for (jj, &j) in s.iter().enumerate() {
                    if ii != jj {
                        t += k[i * n + j];
                    }
                }
            }
            t / (s.len() * (s.len() - 1)) as f64
        };
        let mut cross = 0.0;
        for &i in a {
            for &j in b {
                cross += k[i * n + j];
            }
        }
        values.push(within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Ok(var.sqrt())
}

/// MMD² of `set` against an equally sized uniform sample drawn with `seed`.
pub fn mmd_to_uniform(set: &EmbeddingSet, seed: u64, bandwidth: Option<f64>) -> Result<MmdResult> {
    let u = sample_uniform_sphere(set.len(), set.dim(), seed)?;
    mmd(set, &u, bandwidth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub epoch: usize,
    /// `id` or `ood`.
    pub split: String,
    pub kappa: f64,
    pub rbar: f64,
    pub mmd2: f64,
    pub bandwidth: f64,
}

impl DiagnosticRow {
    pub fn compute(epoch: usize, split: &str, set: &EmbeddingSet, seed: u64) -> Result<Self> {
        let fit = fit_vmf(set)?;
        let m = mmd_to_uniform(set, seed, None)?;
        Ok(DiagnosticRow {
            epoch,
            split: split.to_string(),
            kappa: fit.kappa,
            rbar: fit.rbar,
            mmd2: m.mmd2,
            bandwidth: m.bandwidth,
        })
    }
}

pub fn write_diagnostics_csv(rows: &[DiagnosticRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,split,kappa,rbar,mmd2,bandwidth")?;
    for r in rows {
        writeln!(w, "{},{},{:.12e},{:.12e},{:.12e},{:.12e}", r.epoch, r.split, r.kappa, r.rbar, r.mmd2, r.bandwidth)?;
    }
    Ok(())
}
