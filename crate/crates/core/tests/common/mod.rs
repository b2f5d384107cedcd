//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls into the scoring or diagnostics code it checks.

#![allow(dead_code)]

use nsa_core::autodiff::{Graph, ParamStore, Tensor, Var};
use nsa_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradcases;
pub mod oracles;
pub mod structure;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in `[-1, 1]`.
pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Entries with magnitude in `[0.1, 1]` and random sign, so that no entry sits
/// near a ReLU kink.
pub fn rand_tensor_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1f32..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl FdReport {
    pub fn rel_err(&self) -> f64 {
        rel_err(&self.analytic, &self.numeric)
    }
}

/// Compares autodiff gradients of `Σ c·build(inputs)` (random fixed weights
/// `c`, objective evaluated in f64 outside the graph) with central
/// differences over every input coordinate.
pub fn fd_check<F>(inputs: &[Tensor], seed: u64, eps: f64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fd_check_split(inputs, seed, eps, &build, &build)
}

/// As [`fd_check`], but the numeric side evaluates `reference` instead of
/// `build`. Used where `build` contains stop-gradients and `reference` is the
/// same function with the detached values frozen as constants.
pub fn fd_check_split<F, G>(inputs: &[Tensor], seed: u64, eps: f64, build: &F, reference: &G) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    G: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t.clone()))
        .collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let out = build(&mut g, &vars)?;
    let n_out = g.value(out).numel();
    let mut r = rng(seed ^ 0xC0FF_EE00);
    let weights: Vec<f32> = (0..n_out).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let c = g.constant(Tensor::new(g.shape(out).to_vec(), weights.clone())?);
    let prod = g.mul(out, c)?;
    let obj = g.sum(prod);
    let grads = g.backward(obj)?.param_grads(&store);
    let analytic: Vec<f64> = ids
        .iter()
        .flat_map(|&id| grads.get(id).expect("bound").data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = reference(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = store.clone();
    for &id in &ids {
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps as f32;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps as f32;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            // Use the step actually representable in f32.
            let h = (orig + eps as f32) as f64 - (orig - eps as f32) as f64;
            numeric.push((up - down) / h);
        }
    }
    Ok(FdReport { analytic, numeric })
}

// ---------------------------------------------------------------------------
// f64 reference for the projector → (norm) → predictor → symmetric loss head.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    if n <= 1e-12 {
        vec![0.0; a.len()]
    } else {
        a.iter().map(|v| v / n).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(&unit(a), &unit(b))
}

/// Dense layer stack `W: [in×out]` row-major, ReLU between layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

impl Mlp {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Mlp {
        let mut layers = Vec::new();
        for i in 1.. {
            let Some(w) = store.find(&format!("{prefix}.layer{i}.weight")) else { break };
            let b = store.find(&format!("{prefix}.layer{i}.bias")).expect("bias");
            let wt = store.get(w);
            let (din, dout) = (wt.shape()[0], wt.shape()[1]);
            layers.push((
                wt.data().iter().map(|&v| v as f64).collect(),
                store.get(b).data().iter().map(|&v| v as f64).collect(),
                din,
                dout,
            ));
        }
        Mlp { layers }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|(w, b, _, _)| w.len() + b.len()).sum()
    }

    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for (w, b, _, _) in &mut self.layers {
            if k < w.len() {
                return &mut w[k];
            }
            k -= w.len();
            if k < b.len() {
                return &mut b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (li, (w, b, din, dout)) in self.layers.iter().enumerate() {
            let mut o = b.clone();
            for i in 0..*din {
                for j in 0..*dout {
                    o[j] += h[i] * w[i * dout + j];
                }
            }
            if li < last {
                for v in &mut o {
                    *v = v.max(0.0);
                }
            }
            h = o;
        }
        h
    }

    /// Smallest |pre-activation| at any hidden ReLU for input `x`.
    pub fn kink_margin(&self, x: &[f64]) -> f64 {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        let mut margin = f64::INFINITY;
        for (li, (w, b, din, dout)) in self.layers.iter().enumerate() {
            let mut o = b.clone();
            for i in 0..*din {
                for j in 0..*dout {
                    o[j] += h[i] * w[i * dout + j];
                }
            }
            if li < last {
                for v in &mut o {
                    margin = margin.min(v.abs());
                    *v = v.max(0.0);
                }
            }
            h = o;
        }
        margin
    }
}

/// `½·D(p₁, sg(ẑ₂)) + ½·D(p₂, sg(ẑ₁))` with `D = −cos`, averaged over rows.
/// `targets` are the detached projections.
pub fn head_loss(
    proj: &Mlp,
    pred: &Mlp,
    y1: &[Vec<f64>],
    y2: &[Vec<f64>],
    targets: (&[Vec<f64>], &[Vec<f64>]),
    norm_f: bool,
    norm_g: bool,
) -> f64 {
    let branch = |y: &[f64]| {
        let y = if norm_f { unit(y) } else { y.to_vec() };
        let z = proj.forward(&y);
        let z = if norm_g { unit(&z) } else { z };
        pred.forward(&z)
    };
    let n = y1.len() as f64;
    let a: f64 = y1.iter().zip(targets.1).map(|(y, t)| -cosine(&branch(y), t)).sum::<f64>() / n;
    let b: f64 = y2.iter().zip(targets.0).map(|(y, t)| -cosine(&branch(y), t)).sum::<f64>() / n;
    0.5 * a + 0.5 * b
}

pub fn projections(proj: &Mlp, ys: &[Vec<f64>], norm_f: bool, norm_g: bool) -> Vec<Vec<f64>> {
    ys.iter()
        .map(|y| {
            let y = if norm_f { unit(y) } else { y.clone() };
            let z = proj.forward(&y);
            if norm_g { unit(&z) } else { z }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Brute-force scoring references.

pub fn brute_kcos(train: &[Vec<f64>], query: &[Vec<f64>]) -> Vec<f64> {
    query
        .iter()
        .map(|q| {
            let best = train.iter().map(|t| cosine(q, t)).fold(f64::NEG_INFINITY, f64::max);
            best.clamp(-1.0, 1.0).acos()
        })
        .collect()
}

pub fn mean_vec(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

pub fn brute_ccos(train: &[Vec<f64>], query: &[Vec<f64>]) -> Vec<f64> {
    let mu = mean_vec(train);
    query.iter().map(|q| cosine(&mu, q).clamp(-1.0, 1.0).acos()).collect()
}

/// Unbiased covariance, shrunk toward `(tr Σ / d)·I`.
pub fn brute_cov(train: &[Vec<f64>], shrinkage: f64) -> Vec<Vec<f64>> {
    let d = train[0].len();
    let n = train.len() as f64;
    let mu = mean_vec(train);
    let mut s = vec![vec![0.0; d]; d];
    for r in train {
        for i in 0..d {
            for j in 0..d {
                s[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]);
            }
        }
    }
    let tr: f64 = (0..d).map(|i| s[i][i] / (n - 1.0)).sum();
    for i in 0..d {
        for j in 0..d {
            s[i][j] = (1.0 - shrinkage) * s[i][j] / (n - 1.0) + if i == j { shrinkage * tr / d as f64 } else { 0.0 };
        }
    }
    s
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let d = a.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        x[i] = (y[i] - (i + 1..d).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

/// Cosine in whitened space without forming `Σ^{-1/2}`:
/// `⟨Wa, Wb⟩ = aᵀ Σ⁻¹ b`.
pub fn mahalanobis_cosine(cov: &[Vec<f64>], a: &[f64], b: &[f64]) -> f64 {
    let sa = cholesky_solve(cov, a);
    let sb = cholesky_solve(cov, b);
    let ab = dot(a, &sb);
    let aa = dot(a, &sa);
    let bb = dot(b, &sb);
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

pub fn center(rows: &[Vec<f64>], mu: &[f64]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().zip(mu).map(|(a, m)| a - m).collect()).collect()
}

pub fn brute_kcos_mah(train: &[Vec<f64>], query: &[Vec<f64>], shrinkage: f64) -> Vec<f64> {
    let cov = brute_cov(train, shrinkage);
    let mu = mean_vec(train);
    let (tc, qc) = (center(train, &mu), center(query, &mu));
    qc.iter()
        .map(|q| {
            let best = tc.iter().map(|t| mahalanobis_cosine(&cov, q, t)).fold(f64::NEG_INFINITY, f64::max);
            best.clamp(-1.0, 1.0).acos()
        })
        .collect()
}

pub fn brute_ccos_mah(train: &[Vec<f64>], query: &[Vec<f64>], shrinkage: f64) -> Vec<f64> {
    let cov = brute_cov(train, shrinkage);
    let mu = mean_vec(train);
    query
        .iter()
        .map(|q| mahalanobis_cosine(&cov, &mu, q).clamp(-1.0, 1.0).acos())
        .collect()
}

/// `−log meanⱼ exp(−‖y − xⱼ‖²/(2σ²))`, summed naively in f64.
pub fn brute_gde(train: &[Vec<f64>], query: &[Vec<f64>], sigma: f64) -> Vec<f64> {
    query
        .iter()
        .map(|q| {
            let s: f64 = train
                .iter()
                .map(|t| {
                    let d2: f64 = q.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
                    (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            -(s / train.len() as f64).ln()
        })
        .collect()
}

/// Median of all pairwise Euclidean distances over `i < j`, divided by √2.
pub fn brute_gde_bandwidth(train: &[Vec<f64>]) -> f64 {
    let mut d = Vec::new();
    for i in 0..train.len() {
        for j in i + 1..train.len() {
            d.push(train[i].iter().zip(&train[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    med / std::f64::consts::SQRT_2
}

/// Pairwise-comparison AUROC with ties counted ½; outliers are positives.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Weighted kNN: vote `exp(cos/τ)` over the `k` most similar training rows,
/// ties in similarity broken by lower index, ties in votes by lower class.
pub fn brute_knn(train: &[Vec<f64>], labels: &[u16], query: &[Vec<f64>], k: usize, tau: f64) -> Vec<u16> {
    query
        .iter()
        .map(|q| {
            let mut sims: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, t)| (cosine(q, t), i)).collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = std::collections::BTreeMap::<u16, f64>::new();
            for &(s, i) in sims.iter().take(k) {
                *votes.entry(labels[i]).or_default() += (s / tau).exp();
            }
            let mut best = (0u16, f64::NEG_INFINITY);
            for (&c, &v) in &votes {
                if v > best.1 {
                    best = (c, v);
                }
            }
            best.0
        })
        .collect()
}
