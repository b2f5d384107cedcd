//! Brute-force comparisons for scoring, whitening and the vMF/MMD diagnostics.

use nsa_core::diagnostics::{fit_vmf, mmd};
use nsa_core::eval::{auroc, weighted_knn, KNN_TAU};
use nsa_core::scoring::{
    ensemble, fit_mahalanobis, gde_auto_bandwidth, score_ccos, score_gde, score_kcos, DEFAULT_SHRINKAGE,
};
use nsa_core::{EmbeddingSet, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use super::*;

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rows with a shared offset so the mean direction is well defined; values
/// are rounded through f32 first so both implementations see the same data.
pub fn gaussian_rows(n: usize, d: usize, offset: f64, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let scales: Vec<f64> = (0..d).map(|_| r.random_range(0.3..2.0)).collect();
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(r);
                    (offset + scales[j] * z) as f32 as f64
                })
                .collect()
        })
        .collect()
}

pub fn to_set(rows: &[Vec<f64>]) -> EmbeddingSet {
    EmbeddingSet::from_f64_rows(rows).expect("finite rows")
}

fn loo<F: Fn(&[Vec<f64>], &[Vec<f64>]) -> Vec<f64>>(train: &[Vec<f64>], f: F) -> Vec<f64> {
    (0..train.len())
        .map(|i| {
            let rest: Vec<Vec<f64>> = train.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
            f(&rest, &train[i..=i])[0]
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct ScoringDeviation {
    pub kcos: f64,
    pub kcos_train: f64,
    pub ccos: f64,
    pub kcos_mah: f64,
    pub ccos_mah: f64,
    pub gde: f64,
    pub gde_train: f64,
    pub gde_bandwidth: f64,
    pub ensemble: f64,
}

impl ScoringDeviation {
    pub fn worst(&self) -> f64 {
        [
            self.kcos,
            self.kcos_train,
            self.ccos,
            self.kcos_mah,
            self.ccos_mah,
            self.gde,
            self.gde_train,
            self.gde_bandwidth,
            self.ensemble,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn scoring_deviation(seed: u64) -> Result<ScoringDeviation> {
    let mut r = rng(seed);
    let n = r.random_range(20..=150);
    let m = r.random_range(5..=50);
    let d = r.random_range(2..=12);
    let offset = r.random_range(0.5..2.0);
    let train = gaussian_rows(n, d, offset, &mut r);
    let query = gaussian_rows(m, d, offset * 0.5, &mut r);
    let (ts, qs) = (to_set(&train), to_set(&query));
    let t = fit_mahalanobis(&ts, DEFAULT_SHRINKAGE)?;

    let kcos = score_kcos(&ts, &qs, None)?;
    let ccos = score_ccos(&ts, &qs, None)?;
    let kmah = score_kcos(&ts, &qs, Some(&t))?;
    let cmah = score_ccos(&ts, &qs, Some(&t))?;
    let sigma = brute_gde_bandwidth(&train);
    let gde = score_gde(&ts, &qs, None)?;

    let en = ensemble(&[kcos.clone(), ccos.clone(), gde.clone()])?;
    let norm = |s: &[f64], tr: &[f64]| -> Vec<f64> {
        let lo = tr.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = tr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let parts = [
        norm(&brute_kcos(&train, &query), &loo(&train, brute_kcos)),
        norm(&brute_ccos(&train, &query), &brute_ccos(&train, &train)),
        norm(&brute_gde(&train, &query, sigma), &loo(&train, |a, b| brute_gde(a, b, sigma))),
    ];
    let brute_en: Vec<f64> = (0..m).map(|i| parts.iter().map(|p| p[i]).sum()).collect();

    Ok(ScoringDeviation {
        kcos: max_abs(&kcos.scores, &brute_kcos(&train, &query)),
        kcos_train: max_abs(&kcos.train_scores, &loo(&train, brute_kcos)),
        ccos: max_abs(&ccos.scores, &brute_ccos(&train, &query))
            .max(max_abs(&ccos.train_scores, &brute_ccos(&train, &train))),
        kcos_mah: max_abs(&kmah.scores, &brute_kcos_mah(&train, &query, DEFAULT_SHRINKAGE)),
        ccos_mah: max_abs(&cmah.scores, &brute_ccos_mah(&train, &query, DEFAULT_SHRINKAGE)),
        gde: max_abs(&gde.scores, &brute_gde(&train, &query, sigma)),
        gde_train: max_abs(&gde.train_scores, &loo(&train, |a, b| brute_gde(a, b, sigma))),
        gde_bandwidth: (gde_auto_bandwidth(&ts) - sigma).abs(),
        ensemble: max_abs(&en.scores, &brute_en),
    })
}

/// Scores drawn from a handful of levels so ties are frequent.
pub fn auroc_matches(seed: u64) -> Result<bool> {
    let mut r = rng(seed);
    let n = r.random_range(4..=200);
    let levels = r.random_range(2..=20);
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| r.random_range(0..levels) as f64 + if l { 1.0 } else { 0.0 })
        .collect();
    Ok(auroc(&scores, &labels)?.auroc == brute_auroc(&scores, &labels))
}

pub fn knn_matches(seed: u64) -> Result<bool> {
    let mut r = rng(seed);
    let classes = r.random_range(2..=5u16);
    let n = r.random_range(10..=150);
    let m = r.random_range(5..=50);
    let d = r.random_range(2..=10);
    let k = r.random_range(1..=20);
    let train = gaussian_rows(n, d, 0.0, &mut r);
    let query = gaussian_rows(m, d, 0.0, &mut r);
    let tl: Vec<u16> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let ql: Vec<u16> = (0..m).map(|_| r.random_range(0..classes)).collect();
    let ts = to_set(&train).with_labels(tl.clone(), vec![false; n])?;
    let qs = to_set(&query).with_labels(ql.clone(), vec![false; m])?;
    let got = weighted_knn(&ts, &qs, k, KNN_TAU)?;
    let want = brute_knn(&train, &tl, &query, k, KNN_TAU);
    let acc = want.iter().zip(&ql).filter(|(a, b)| a == b).count() as f64 / m as f64;
    Ok(got.predictions == want && (got.accuracy - acc).abs() < 1e-12)
}

pub struct WhiteningReport {
    /// `‖W Σ_reg Wᵀ − I‖_F / ‖I‖_F` against the transform's own covariance.
    pub fitted: f64,
    /// Same for the sample covariance of the whitened rows `W(x−μ)`.
    pub whitened_sample: f64,
}

fn frob_rel_to_identity(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += (m[i][j] - if i == j { 1.0 } else { 0.0 }).powi(2);
        }
    }
    s.sqrt() / (d as f64).sqrt()
}

fn sandwich(w: &[f64], s: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    let mut ws = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            ws[i][j] = (0..d).map(|k| w[i * d + k] * s[k][j]).sum();
        }
    }
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            out[i][j] = (0..d).map(|k| ws[i][k] * w[j * d + k]).sum();
        }
    }
    out
}

/// Correlated Gaussian rows `μ + Az + e` with `e ~ N(0, I)`.
pub fn correlated_rows(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let mean: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            (0..d)
                .map(|i| {
                    let e: f64 = StandardNormal.sample(r);
                    (mean[i] + dot(&a[i], &z) + e) as f32 as f64
                })
                .collect()
        })
        .collect()
}

pub fn whitening(seed: u64, n: usize, d: usize) -> Result<WhiteningReport> {
    let mut r = rng(seed);
    let rows = correlated_rows(n, d, &mut r);
    let set = to_set(&rows);
    let t = fit_mahalanobis(&set, DEFAULT_SHRINKAGE)?;
    let reg: Vec<Vec<f64>> = t.covariance.chunks(d).map(|c| c.to_vec()).collect();
    let white: Vec<Vec<f64>> = t.whiten(&set)?.chunks(d).map(|c| c.to_vec()).collect();
    Ok(WhiteningReport {
        fitted: frob_rel_to_identity(&sandwich(&t.whitener, &reg, d)),
        whitened_sample: frob_rel_to_identity(&brute_cov(&white, 0.0)),
    })
}

/// Training rows `±√d·qᵢ` over several random orthonormal frames: mean exactly
/// zero and covariance exactly proportional to the identity.
pub fn identity_cov_gap(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let d = r.random_range(3..=10);
    let frames = r.random_range(2..=6);
    let mut train = Vec::new();
    for _ in 0..frames {
        let basis = orthonormal_frame(d, &mut r);
        for q in basis {
            let s = (d as f64).sqrt();
            train.push(q.iter().map(|v| v * s).collect::<Vec<f64>>());
            train.push(q.iter().map(|v| -v * s).collect::<Vec<f64>>());
        }
    }
    let query = gaussian_rows(40, d, 0.0, &mut r);
    let (ts, qs) = (to_set(&train), to_set(&query));
    let t = fit_mahalanobis(&ts, DEFAULT_SHRINKAGE)?;
    let plain = score_kcos(&ts, &qs, None)?;
    let mah = score_kcos(&ts, &qs, Some(&t))?;
    Ok(max_abs(&plain.scores, &mah.scores))
}

/// Gram–Schmidt on Gaussian vectors.
pub fn orthonormal_frame(d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if norm(&v) > 1e-6 {
            basis.push(unit(&v));
        }
    }
    basis
}

pub fn uniform_sphere(n: usize, d: usize, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| unit(&(0..d).map(|_| StandardNormal.sample(r)).collect::<Vec<f64>>()))
        .collect()
}

/// Wood (1994) rejection sampler for vMF(μ, κ) on S^{d−1}.
pub fn wood_vmf(n: usize, mu: &[f64], kappa: f64, r: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let d = mu.len();
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid");
    let mu = unit(mu);
    (0..n)
        .map(|_| {
            let w = loop {
                let z: f64 = beta.sample(r);
                let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
                let u: f64 = r.random();
                if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                    break w;
                }
            };
            // Direction orthogonal to μ.
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            let p = dot(&v, &mu);
            v.iter_mut().zip(&mu).for_each(|(x, m)| *x -= p * m);
            let v = unit(&v);
            let s = (1.0 - w * w).max(0.0).sqrt();
            mu.iter().zip(&v).map(|(m, x)| w * m + s * x).collect()
        })
        .collect()
}

pub fn brute_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (2.0 * sigma * sigma)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

pub struct VmfReport {
    pub kappa_hat: f64,
    pub kappa_uniform: f64,
    pub mmd_uniform: f64,
    pub mmd_concentrated: f64,
    /// Library MMD against the brute-force estimate on the same rows and σ.
    pub mmd_oracle_gap: f64,
}

/// κ̂ on `n` Wood samples with κ=50 in d=16; uniform κ̂ in d=8; MMD² of
/// uniform-vs-uniform and vMF-vs-uniform on `n_mmd` rows.
pub fn vmf_report(seed: u64, n: usize, n_mmd: usize) -> Result<VmfReport> {
    let mut r = rng(seed);
    let mut mu: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut r)).collect();
    mu = unit(&mu);
    let conc = wood_vmf(n, &mu, 50.0, &mut r);
    let kappa_hat = fit_vmf(&to_set(&conc))?.kappa;
    let kappa_uniform = fit_vmf(&to_set(&uniform_sphere(n, 8, &mut r)))?.kappa;

    let u1 = uniform_sphere(n_mmd, 16, &mut r);
    let u2 = uniform_sphere(n_mmd, 16, &mut r);
    let (s1, s2) = (to_set(&u1), to_set(&u2));
    let cs = to_set(&conc[..n_mmd]);
    let uu = mmd(&s1, &s2, None)?;
    let cu = mmd(&cs, &s2, None)?;
    // Brute force on a subset, at the library's bandwidth.
    let k = n_mmd.min(300);
    let sub = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows[..k].iter().map(|r| unit(&r.iter().map(|&v| v as f32 as f64).collect::<Vec<_>>())).collect() };
    let lib_sub = mmd(&to_set(&conc[..k]), &to_set(&u2[..k]), Some(cu.bandwidth))?.mmd2;
    let mmd_oracle_gap = (lib_sub - brute_mmd2(&sub(&conc), &sub(&u2), cu.bandwidth)).abs();
    Ok(VmfReport {
        kappa_hat,
        kappa_uniform,
        mmd_uniform: uu.mmd2,
        mmd_concentrated: cu.mmd2,
        mmd_oracle_gap,
    })
}
