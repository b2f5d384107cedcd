//! Training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{make_views, AugmentationPolicy};
use super::loss::{byol_loss, simclr_loss, symmetric_neg_cosine};
use crate::autodiff::{Adam, CosineSchedule, Graph, Optimizer, Tensor};
use crate::data::ImageDataset;
use crate::error::{NsaError, Result};
use crate::nets::{ema_update, ArchConfig, Method, ModelConfig, SslModel, Trace};
use crate::seeding::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub norm_f: bool,
    pub norm_g: bool,
    pub arch: ArchConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// NT-Xent temperature.
    pub temperature: f64,
    /// BYOL target momentum.
    pub ema_momentum: f64,
    pub augment: AugmentationPolicy,
    /// Debug: feed un-detached targets to the SimSiam/BYOL loss.
    pub no_stop_grad: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::SimSiam,
            norm_f: false,
            norm_g: false,
            arch: ArchConfig::default(),
            batch_size: 64,
            epochs: 100,
            lr: 1e-4,
            seed: 0,
            temperature: 0.5,
            ema_momentum: 0.996,
            augment: AugmentationPolicy::default(),
            no_stop_grad: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NsaError::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(NsaError::config("batch size must be at least 2"));
        }
        if self.method.is_contrastive() && self.batch_size < 4 {
            return Err(NsaError::config("contrastive training needs batch size >= 4"));
        }
        if !(self.temperature > 0.0) {
            return Err(NsaError::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(NsaError::config("EMA momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(NsaError::config("epochs must be at least 1"));
        }
        self.augment.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            method: self.method,
            norm_f: self.norm_f,
            norm_g: self.norm_g,
            arch: self.arch.clone(),
            init_seed: mix(&[self.seed, 0x1417]),
        }
    }

    fn policy(&self) -> AugmentationPolicy {
        let mut p = self.augment.clone();
        p.rotation_shift = self.method == Method::SimClrNeg;
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub collapse_std: f64,
    pub kappa_id: Option<f64>,
    pub mmd_id: Option<f64>,
}

/// Per-dimension standard deviation across the batch of L2-normalized rows, averaged over dimensions.
pub fn collapse_std(rows: &Tensor) -> f64 {
    let (n, d) = (rows.shape()[0], rows.numel() / rows.shape()[0].max(1));
    if n < 2 || d == 0 {
        return 0.0;
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = rows.row(i).iter().map(|&v| v as f64).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
            r.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    for j in 0..d {
        let mean = unit.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = unit.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

pub fn write_epoch_log(log: &[EpochLog], w: &mut impl Write) -> Result<()> {
    writeln!(w, "epoch,loss,collapse_std,kappa_id,mmd_id")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
    for e in log {
        writeln!(
            w,
            "{},{:.9},{:.9},{},{}",
            e.epoch,
            e.loss,
            e.collapse_std,
            opt(e.kappa_id),
            opt(e.mmd_id)
        )?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: SslModel,
    pub log: Vec<EpochLog>,
}

/// Called after every epoch; may fill the optional diagnostics of the log entry.
pub type EpochObserver<'a> = dyn FnMut(&SslModel, &mut EpochLog) -> Result<()> + 'a;

pub fn train(config: &TrainConfig, dataset: &ImageDataset) -> Result<TrainOutcome> {
    train_with(config, dataset, &mut |_, _| Ok(()))
}

pub fn train_with(config: &TrainConfig, dataset: &ImageDataset, observer: &mut EpochObserver<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(NsaError::config("cannot train on an empty dataset"));
    }
    if dataset.len() < 2 {
        return Err(NsaError::InsufficientSamples { needed: 2, got: dataset.len() });
    }
    let mut model = SslModel::new(config.model_config())?;
    let policy = config.policy();
    let batch = config.batch_size.min(dataset.len());
    if config.method.is_contrastive() && batch < 4 {
        return Err(NsaError::InsufficientSamples { needed: 4, got: dataset.len() });
    }
    let steps_per_epoch = dataset.len() / batch;
    let schedule = CosineSchedule {
        base_lr: config.lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let mut optim = Adam::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 0x5eed, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut std_sum) = (0.0, 0.0);
        for chunk in order.chunks_exact(batch) {
            let (loss, std) = train_step(&mut model, config, &policy, dataset, chunk, step, &mut optim, schedule.lr(step))
                .map_err(|e| match e {
                    NsaError::Training { reason, .. } => NsaError::Training { epoch, reason },
                    other => other,
                })?;
            loss_sum += loss;
            std_sum += std;
            step += 1;
        }
        let mut entry = EpochLog {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            collapse_std: std_sum / steps_per_epoch as f64,
            kappa_id: None,
            mmd_id: None,
        };
        observer(&model, &mut entry)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

fn split_trace(g: &mut Graph, t: &Trace, b: usize) -> Result<[Trace; 2]> {
    let mut half = |start: usize| -> Result<Trace> {
        Ok(Trace {
            features: Default::default(),
            projection: g.slice_rows(t.projection, start, start + b)?,
            prediction: t.prediction.map(|p| g.slice_rows(p, start, start + b)).transpose()?,
            encoder: g.slice_rows(t.encoder, start, start + b)?,
        })
    };
    Ok([half(0)?, half(b)?])
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut SslModel,
    config: &TrainConfig,
    policy: &AugmentationPolicy,
    dataset: &ImageDataset,
    indices: &[usize],
    step: usize,
    optim: &mut Adam,
    lr: f64,
) -> Result<(f64, f64)> {
    let views = make_views(policy, dataset, indices, config.seed, step as u64)?;
    let b = indices.len();
    let mut g = Graph::new();
    let x = g.constant(views.views.clone());
    let block = !config.no_stop_grad;
    let (loss, encoder) = match config.method {
        Method::SimSiam | Method::Byol => {
            let trace = model.forward(&mut g, &model.params, x, true, false)?;
            let [t1, t2] = split_trace(&mut g, &trace, b)?;
            let loss = if config.method == Method::Byol {
                let target = model.target.as_ref().ok_or_else(|| NsaError::config("BYOL model without target"))?;
                let mut tg = Graph::inference();
                let tx = tg.constant(views.views);
                let tt = model.forward(&mut tg, target, tx, false, false)?;
                let z = tg.value(tt.projection).clone();
                let zc = g.constant(z);
                let z1 = g.slice_rows(zc, 0, b)?;
                let z2 = g.slice_rows(zc, b, 2 * b)?;
                if block {
                    byol_loss(&mut g, &t1, &t2, Some(z1), Some(z2))?
                } else {
                    symmetric_neg_cosine(&mut g, t1.prediction.unwrap(), t2.prediction.unwrap(), t1.projection, t2.projection, false)?
                }
            } else {
                symmetric_neg_cosine(
                    &mut g,
                    t1.prediction.ok_or_else(|| NsaError::config("SimSiam model without predictor"))?,
                    t2.prediction.ok_or_else(|| NsaError::config("SimSiam model without predictor"))?,
                    t1.projection,
                    t2.projection,
                    block,
                )?
            };
            (loss, t1.encoder)
        }
        Method::SimClr | Method::SimClrNeg => match views.rotated {
            Some((rot, ids)) => {
                let all = g.constant(concat_batches(&views.views, &rot)?);
                let trace = model.forward(&mut g, &model.params, all, false, false)?;
                let z = g.slice_rows(trace.projection, 0, 2 * b)?;
                let r = g.slice_rows(trace.projection, 2 * b, 3 * b)?;
                let enc = g.slice_rows(trace.encoder, 0, b)?;
                (simclr_loss(&mut g, z, config.temperature, Some((r, &ids)))?, enc)
            }
            None => {
                let trace = model.forward(&mut g, &model.params, x, false, false)?;
                let enc = g.slice_rows(trace.encoder, 0, b)?;
                (simclr_loss(&mut g, trace.projection, config.temperature, None)?, enc)
            }
        },
    };
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(NsaError::Training { epoch: 0, reason: format!("loss is {value} at step {step}") });
    }
    let std = collapse_std(g.value(encoder));
    let grads = g.backward(loss)?.param_grads(&model.params);
    if !grads.is_finite() {
        return Err(NsaError::Training { epoch: 0, reason: format!("non-finite gradient at step {step}") });
    }
    optim.step(&mut model.params, &grads, lr)?;
    if let Some(target) = model.target.as_mut() {
        ema_update(target, &model.params, config.ema_momentum)?;
    }
    Ok((value, std))
}

fn concat_batches(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}
