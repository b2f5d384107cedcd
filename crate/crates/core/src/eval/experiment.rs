//! End-to-end per-class experiment driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{auroc, linear_probe, make_split, EvalSplit, ProbeConfig};
use crate::data::{synth_dataset, ImageDataset, RunConfig, Variant};
use crate::diagnostics::{fit_vmf, mmd_to_uniform};
use crate::embedding::EmbeddingSet;
use crate::error::{NsaError, Result};
use crate::nets::{FeatureMapName, Method, SslModel};
use crate::scoring::{ensemble, ensemble_metrics, fit_mahalanobis, score_metric, Metric, ScoreReport};
use crate::seeding::mix;
use crate::ssl::{images_to_tensor, train_with, EpochLog, TrainConfig};

const EMBED_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub class: u16,
    pub seed: u64,
    pub method: Method,
    pub norm_f: bool,
    pub norm_g: bool,
    pub batch: usize,
    pub p: f64,
    /// `metric@feature_map`, or `Ens`.
    pub metric: String,
    pub auroc: f64,
    pub kappa_id: Option<f64>,
    pub kappa_ood: Option<f64>,
    pub mmd_id: Option<f64>,
    pub probe_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub class: u16,
    pub seed: u64,
    pub method: Method,
    pub norm_f: bool,
    pub norm_g: bool,
    pub batch: usize,
    pub p: f64,
    pub epoch: usize,
    pub loss: f64,
    pub collapse_std: f64,
    pub auroc: Option<f64>,
    pub kappa_id: Option<f64>,
    pub mmd_id: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub rows: Vec<ResultRow>,
    pub curves: Vec<CurveRow>,
}

#[derive(Clone, Debug)]
struct Job {
    variant: Variant,
    class: u16,
    seed: u64,
    p: f64,
}

/// Worker count from `NSA_THREADS`, else the available parallelism.
fn worker_count(jobs: usize) -> usize {
    let n = std::env::var("NSA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    n.min(jobs).max(1)
}

pub fn data_pools(config: &RunConfig) -> Result<(ImageDataset, ImageDataset)> {
    let d = &config.data;
    let train = synth_dataset(d.kind, d.classes, d.train_per_class, d.image_size, d.seed)?;
    let test = synth_dataset(d.kind, d.classes, d.test_per_class, d.image_size, mix(&[d.seed, 1]))?;
    Ok((train, test))
}

pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResults> {
    run_experiment_with(config, &|_, _| {})
}

/// Runs every `(variant, class, seed, p)` combination. `progress` is called
/// after each finished job with `(done, total)`.
pub fn run_experiment_with(config: &RunConfig, progress: &(dyn Fn(usize, usize) + Sync)) -> Result<ExperimentResults> {
    config.validate()?;
    let (train_pool, test_pool) = data_pools(config)?;
    let mut jobs = Vec::new();
    for variant in config.variants() {
        for &class in &config.eval.inlier_classes {
            for &seed in &config.eval.seeds {
                for &p in &config.eval.pollution {
                    jobs.push(Job { variant: variant.clone(), class, seed, p });
                }
            }
        }
    }
    let total = jobs.len();
    let slots: Vec<Mutex<Option<Result<ExperimentResults>>>> = (0..total).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..worker_count(total) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= total {
                    break;
                }
                let job = &jobs[i];
                let r = run_job(config, &train_pool, &test_pool, job).map_err(|e| NsaError::InClass {
                    class: job.class,
                    source: Box::new(e),
                });
                *slots[i].lock().expect("slot lock") = Some(r);
                progress(done.fetch_add(1, Ordering::SeqCst) + 1, total);
            });
        }
    });
    let mut out = ExperimentResults::default();
    for slot in slots {
        let r = slot.into_inner().expect("slot lock").expect("every job ran")?;
        out.rows.extend(r.rows);
        out.curves.extend(r.curves);
    }
    Ok(out)
}

fn subset(ds: &ImageDataset, idx: &[usize]) -> Result<ImageDataset> {
    let mut pixels = Vec::with_capacity(idx.len() * ds.image_len());
    for &i in idx {
        pixels.extend_from_slice(ds.image(i));
    }
    ImageDataset::new(
        format!("{}[subset]", ds.name),
        [ds.channels, ds.height, ds.width],
        ds.class_count,
        pixels,
        idx.iter().map(|&i| ds.labels[i]).collect(),
    )
}

/// Embeds images `idx` of `ds` and returns one labelled set per requested map.
fn embed_maps(
    model: &SslModel,
    ds: &ImageDataset,
    idx: &[usize],
    outlier: &[bool],
    maps: &[FeatureMapName],
) -> Result<BTreeMap<FeatureMapName, EmbeddingSet>> {
    let feats = model.embed(&images_to_tensor(ds, idx), EMBED_CHUNK)?;
    let classes: Vec<u16> = idx.iter().map(|&i| ds.labels[i]).collect();
    let mut out = BTreeMap::new();
    for &m in maps {
        let t = feats
            .get(&m)
            .ok_or_else(|| NsaError::config(format!("model does not produce feature map `{m}`")))?;
        let n = t.shape()[0];
        let set = EmbeddingSet::new(n, t.numel() / n.max(1), t.data().to_vec())?
            .with_labels(classes.clone(), outlier.to_vec())?
            .with_source(m.to_string(), model.checksum());
        out.insert(m, set);
    }
    Ok(out)
}

fn split_sets(set: &EmbeddingSet) -> (EmbeddingSet, EmbeddingSet) {
    let id: Vec<usize> = (0..set.len()).filter(|&i| !set.outlier[i]).collect();
    let ood: Vec<usize> = (0..set.len()).filter(|&i| set.outlier[i]).collect();
    (set.select(&id), set.select(&ood))
}

/// Scores one map with one metric, fitting the whitener on demand.
fn score_one(
    config: &RunConfig,
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    metric: Metric,
    whiteners: &mut BTreeMap<String, crate::scoring::MahalanobisTransform>,
) -> Result<ScoreReport> {
    let t = if metric.uses_whitening() {
        if !whiteners.contains_key(&train.feature_map) {
            whiteners.insert(train.feature_map.clone(), fit_mahalanobis(train, config.scoring.shrinkage)?);
        }
        whiteners.get(&train.feature_map)
    } else {
        None
    };
    score_metric(train, test, metric, t, config.scoring.gde_bandwidth)
}

fn run_job(config: &RunConfig, train_pool: &ImageDataset, test_pool: &ImageDataset, job: &Job) -> Result<ExperimentResults> {
    let v = &job.variant;
    let split_seed = mix(&[job.seed, job.class as u64, (job.p * 1e6).round() as u64, 0x5917]);
    let split = make_split(train_pool, test_pool, job.class, job.p, split_seed)?;
    let train_ds = subset(train_pool, &split.train)?;
    let tc = TrainConfig {
        method: v.method,
        norm_f: v.norm_f,
        norm_g: v.norm_g,
        batch_size: v.batch_size.unwrap_or(config.train.batch_size),
        seed: mix(&[job.seed, job.class as u64]),
        ..config.train.clone()
    };
    let diag = &config.diagnostics;
    let mut curves = Vec::new();
    let mut observer = |model: &SslModel, log: &mut EpochLog| -> Result<()> {
        if diag.curve_every == 0 || (log.epoch % diag.curve_every != 0 && log.epoch != tc.epochs) {
            return Ok(());
        }
        let maps = [diag.curve_feature_map];
        let tr = embed_maps(model, train_pool, &split.train, &split.train_outlier, &maps)?;
        let te = embed_maps(model, test_pool, &split.test, &split.test_outlier, &maps)?;
        let (tr, te) = (&tr[&maps[0]], &te[&maps[0]]);
        let report = score_one(config, tr, te, diag.curve_metric, &mut BTreeMap::new())?;
        let a = auroc(&report.scores, &te.outlier)?;
        let (id, _) = split_sets(te);
        let kappa = fit_vmf(&id).ok().map(|f| f.kappa);
        let mmd_id = mmd_to_uniform(&id, diag.seed, None).ok().map(|m| m.mmd2);
        log.kappa_id = kappa;
        log.mmd_id = mmd_id;
        curves.push(CurveRow {
            class: job.class,
            seed: job.seed,
            method: v.method,
            norm_f: v.norm_f,
            norm_g: v.norm_g,
            batch: tc.batch_size,
            p: job.p,
            epoch: log.epoch,
            loss: log.loss,
            collapse_std: log.collapse_std,
            auroc: Some(a.auroc),
            kappa_id: kappa,
            mmd_id,
        });
        Ok(())
    };
    let outcome = train_with(&tc, &train_ds, &mut observer)?;
    if diag.curve_every == 0 {
        curves.extend(outcome.log.iter().map(|log| CurveRow {
            class: job.class,
            seed: job.seed,
            method: v.method,
            norm_f: v.norm_f,
            norm_g: v.norm_g,
            batch: tc.batch_size,
            p: job.p,
            epoch: log.epoch,
            loss: log.loss,
            collapse_std: log.collapse_std,
            auroc: None,
            kappa_id: None,
            mmd_id: None,
        }));
    }
    let model = outcome.model;
    let sc = &config.scoring;
    let mut maps: Vec<FeatureMapName> = sc.feature_maps.clone();
    if sc.ensemble {
        maps.extend(&sc.ensemble_maps);
    }
    if diag.enabled || config.eval.probe {
        maps.push(diag.feature_map);
    }
    maps.sort();
    maps.dedup();
    let tr = embed_maps(&model, train_pool, &split.train, &split.train_outlier, &maps)?;
    let te = embed_maps(&model, test_pool, &split.test, &split.test_outlier, &maps)?;
    let (kappa_id, kappa_ood, mmd_id) = if diag.enabled {
        let (id, ood) = split_sets(&te[&diag.feature_map]);
        (
            Some(fit_vmf(&id)?.kappa),
            Some(fit_vmf(&ood)?.kappa),
            Some(mmd_to_uniform(&id, diag.seed, None)?.mmd2),
        )
    } else {
        (None, None, None)
    };
    let probe_acc = if config.eval.probe {
        let all_train: Vec<usize> = (0..train_pool.len()).collect();
        let all_test: Vec<usize> = (0..test_pool.len()).collect();
        let m = [diag.feature_map];
        let ptr = embed_maps(&model, train_pool, &all_train, &vec![false; all_train.len()], &m)?;
        let pte = embed_maps(&model, test_pool, &all_test, &vec![false; all_test.len()], &m)?;
        Some(linear_probe(&ptr[&m[0]], &pte[&m[0]], &ProbeConfig::default())?.accuracy)
    } else {
        None
    };
    let row = |metric: String, auroc: f64| ResultRow {
        class: job.class,
        seed: job.seed,
        method: v.method,
        norm_f: v.norm_f,
        norm_g: v.norm_g,
        batch: tc.batch_size,
        p: job.p,
        metric,
        auroc,
        kappa_id,
        kappa_ood,
        mmd_id,
        probe_acc,
    };
    let mut whiteners = BTreeMap::new();
    let mut rows = Vec::new();
    let labels = &split.test_outlier;
    for &m in &sc.feature_maps {
        for &metric in &sc.metrics {
            let r = score_one(config, &tr[&m], &te[&m], metric, &mut whiteners)?;
            rows.push(row(format!("{metric}@{m}"), auroc(&r.scores, labels)?.auroc));
        }
    }
    if sc.ensemble {
        let mut parts = Vec::new();
        for &m in &sc.ensemble_maps {
            for metric in ensemble_metrics(m.is_spatial()) {
                parts.push(score_one(config, &tr[&m], &te[&m], metric, &mut whiteners)?);
            }
        }
        let ens = ensemble(&parts)?;
        rows.push(row("Ens".into(), auroc(&ens.scores, labels)?.auroc));
    }
    Ok(ExperimentResults { rows, curves })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn write_results_csv(rows: &[ResultRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "class,seed,method,norm_f,norm_g,batch,p,metric,auroc,kappa_id,kappa_ood,mmd_id,probe_acc")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.9},{},{},{},{}",
            r.class,
            r.seed,
            r.method,
            r.norm_f,
            r.norm_g,
            r.batch,
            r.p,
            r.metric,
            r.auroc,
            opt(r.kappa_id),
            opt(r.kappa_ood),
            opt(r.mmd_id),
            opt(r.probe_acc)
        )?;
    }
    Ok(())
}

pub fn write_curves_csv(rows: &[CurveRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "class,seed,method,norm_f,norm_g,batch,p,epoch,loss,collapse_std,auroc,kappa_id,mmd_id")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.9},{:.9},{},{},{}",
            r.class,
            r.seed,
            r.method,
            r.norm_f,
            r.norm_g,
            r.batch,
            r.p,
            r.epoch,
            r.loss,
            r.collapse_std,
            opt(r.auroc),
            opt(r.kappa_id),
            opt(r.mmd_id)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub norm_f: bool,
    pub norm_g: bool,
    pub batch: usize,
    pub p: f64,
    pub metric: String,
    pub n: usize,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub kappa_id_mean: Option<f64>,
}

/// Mean ± sample std of AUROC across classes and seeds, per configuration and metric.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, bool, bool, usize, u64, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.to_string(), r.norm_f, r.norm_g, r.batch, r.p.to_bits(), r.metric.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len();
            let mean = g.iter().map(|r| r.auroc).sum::<f64>() / n as f64;
            let std = if n > 1 {
                (g.iter().map(|r| (r.auroc - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let kappas: Vec<f64> = g.iter().filter_map(|r| r.kappa_id).collect();
            SummaryRow {
                method: g[0].method,
                norm_f: g[0].norm_f,
                norm_g: g[0].norm_g,
                batch: g[0].batch,
                p: g[0].p,
                metric: g[0].metric.clone(),
                n,
                auroc_mean: mean,
                auroc_std: std,
                kappa_id_mean: (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    tool_version: &'a str,
    input_hash: String,
    train_pool_sha256: String,
    test_pool_sha256: String,
    outputs: BTreeMap<String, String>,
    config: &'a RunConfig,
}

/// Writes the run manifest. `outputs` maps file names to their contents so
/// their SHA-256 is recorded.
pub fn write_manifest(config: &RunConfig, outputs: &[(&str, &[u8])], w: &mut impl Write) -> Result<()> {
    let (train, test) = data_pools(config)?;
    let (tr, te) = (train.checksum(), test.checksum());
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(tr.as_bytes());
    h.update(te.as_bytes());
    let manifest = Manifest {
        name: &config.name,
        tool_version: env!("CARGO_PKG_VERSION"),
        input_hash: format!("{:x}", h.finalize()),
        train_pool_sha256: tr,
        test_pool_sha256: te,
        outputs: outputs
            .iter()
            .map(|(name, bytes)| (name.to_string(), format!("{:x}", Sha256::digest(bytes))))
            .collect(),
        config,
    };
    serde_json::to_writer_pretty(&mut *w, &manifest)?;
    writeln!(w)?;
    Ok(())
}

impl EvalSplit {
    /// Images of the training split as their own dataset.
    pub fn train_images(&self, pool: &ImageDataset) -> Result<ImageDataset> {
        subset(pool, &self.train)
    }
}
