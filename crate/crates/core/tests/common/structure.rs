//! Stop-gradient structure checks on a tiny SimSiam model.

use nsa_core::autodiff::{Graph, Tensor};
use nsa_core::nets::{ArchConfig, FeatureMapName, Method, ModelConfig, SslModel};
use nsa_core::ssl::{simsiam_loss, symmetric_neg_cosine};
use nsa_core::Result;
use rand::Rng;

use super::{head_loss, projections, rand_tensor, rel_err, rng, Mlp};

pub fn tiny_model(norm_f: bool, norm_g: bool, seed: u64) -> SslModel {
    let mut config = ModelConfig::new(Method::SimSiam, norm_f, norm_g);
    config.arch = ArchConfig {
        in_channels: 3,
        widths: [4, 6, 6, 8],
        proj_dim: 5,
        pred_hidden: 8,
    };
    config.init_seed = seed;
    let mut model = SslModel::new(config).expect("valid tiny config");
    // Nonzero biases: with zero biases the predictor is positively homogeneous
    // and z ↦ z/‖z‖ would not change the loss at all.
    let mut r = rng(seed ^ 0xB1A5);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id);
        if name.ends_with(".bias") && !name.starts_with("encoder") {
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = Tensor::from_fn(&shape, |_| r.random_range(0.05f32..0.5));
        }
    }
    model
}

pub fn views(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed ^ 0x5EED);
    (rand_tensor(&[3, 3, 8, 8], &mut r), rand_tensor(&[3, 3, 8, 8], &mut r))
}

pub struct BlockedReport {
    /// Parameter gradients with in-graph stop-grad equal those with the
    /// targets frozen as constants, bit for bit.
    pub identical_to_frozen: bool,
    /// No gradient reaches a projection that is consumed only through stop-grad.
    pub detached_branch_zero: bool,
    pub predictor_grad_norm: f64,
}

/// Baseline SimSiam (no normalization).
pub fn blocked_branch(seed: u64) -> Result<BlockedReport> {
    let model = tiny_model(false, false, seed);
    let (x1, x2) = views(seed);

    let mut g = Graph::new();
    let (c1, c2) = (g.constant(x1.clone()), g.constant(x2.clone()));
    let t1 = model.forward(&mut g, &model.params, c1, true, false)?;
    let t2 = model.forward(&mut g, &model.params, c2, true, false)?;
    let full_loss = simsiam_loss(&mut g, &t1, &t2)?;
    let full = g.backward(full_loss)?.param_grads(&model.params);
    let (z1, z2) = (g.value(t1.projection).clone(), g.value(t2.projection).clone());

    let mut g = Graph::new();
    let (c1, c2) = (g.constant(x1.clone()), g.constant(x2.clone()));
    let t1 = model.forward(&mut g, &model.params, c1, true, false)?;
    let t2 = model.forward(&mut g, &model.params, c2, true, false)?;
    let (f1, f2) = (g.constant(z1), g.constant(z2));
    let loss = symmetric_neg_cosine(&mut g, t1.prediction.unwrap(), t2.prediction.unwrap(), f1, f2, true)?;
    let frozen = g.backward(loss)?.param_grads(&model.params);
    let identical_to_frozen = full.flat() == frozen.flat() && full.len() == frozen.len();

    // Targets from separate passes, so their nodes feed the loss only via sg.
    let mut g = Graph::new();
    let (c1, c2) = (g.constant(x1), g.constant(x2));
    let o1 = model.forward(&mut g, &model.params, c1, true, false)?;
    let o2 = model.forward(&mut g, &model.params, c2, true, false)?;
    let s1 = model.forward(&mut g, &model.params, c1, false, false)?;
    let s2 = model.forward(&mut g, &model.params, c2, false, false)?;
    let loss = symmetric_neg_cosine(&mut g, o1.prediction.unwrap(), o2.prediction.unwrap(), s1.projection, s2.projection, true)?;
    let grads = g.backward(loss)?;
    let zero = |v| grads.wrt(v).is_none_or(|t: &Tensor| t.data().iter().all(|&x| x == 0.0));
    let detached_branch_zero = [s1.projection, s2.projection, s1.encoder, s2.encoder].into_iter().all(zero);
    let pg = grads.param_grads(&model.params);
    let predictor_grad_norm = model
        .predictor_params()
        .iter()
        .map(|&id| pg.get(id).unwrap().l2_norm().powi(2))
        .sum::<f64>()
        .sqrt();

    Ok(BlockedReport {
        identical_to_frozen,
        detached_branch_zero,
        predictor_grad_norm,
    })
}

pub struct NormPathReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub loss_graph: f64,
    pub loss_oracle: f64,
    /// Projector gradient norm of the same parameters without `norm_g`.
    pub baseline: Vec<f64>,
    pub kink_margin: f64,
}

impl NormPathReport {
    pub fn rel_err(&self) -> f64 {
        rel_err(&self.analytic, &self.numeric)
    }

    pub fn grad_norm(&self) -> f64 {
        self.analytic.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn differs_from_baseline(&self) -> bool {
        rel_err(&self.analytic, &self.baseline) > 1e-3
    }
}

fn projector_grads(model: &SslModel, x1: &Tensor, x2: &Tensor) -> Result<(Vec<f64>, f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let (c1, c2) = (g.constant(x1.clone()), g.constant(x2.clone()));
    let t1 = model.forward(&mut g, &model.params, c1, true, true)?;
    let t2 = model.forward(&mut g, &model.params, c2, true, true)?;
    let loss = simsiam_loss(&mut g, &t1, &t2)?;
    let grads = g.backward(loss)?.param_grads(&model.params);
    let flat = model
        .projector_params()
        .iter()
        .flat_map(|&id| grads.get(id).unwrap().data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect();
    let rows = |t: &nsa_core::nets::Trace| -> Vec<Vec<f64>> {
        let v = g.value(t.features[&FeatureMapName::ConvBlockPooled(4)]);
        let d = v.shape()[1];
        v.data().chunks(d).map(|r| r.iter().map(|&x| x as f64).collect()).collect()
    };
    Ok((flat, g.value(loss).item() as f64, rows(&t1), rows(&t2)))
}

/// SimSiam with `norm_g` (and optionally `norm_f`): projector gradients from
/// autodiff against f64 central differences of an independent head
/// implementation with detached targets.
pub fn norm_path(seed: u64, norm_f: bool) -> Result<NormPathReport> {
    let model = tiny_model(norm_f, true, seed);
    let (x1, x2) = views(seed);
    let (analytic, loss_graph, y1, y2) = projector_grads(&model, &x1, &x2)?;

    let proj = Mlp::from_store(&model.params, "projector");
    let pred = Mlp::from_store(&model.params, "predictor");
    let targets1 = projections(&proj, &y1, norm_f, true);
    let targets2 = projections(&proj, &y2, norm_f, true);
    let loss = |p: &Mlp| head_loss(p, &pred, &y1, &y2, (&targets1, &targets2), norm_f, true);
    let loss_oracle = loss(&proj);

    let prep = |y: &Vec<f64>| if norm_f { super::unit(y) } else { y.clone() };
    let mut kink_margin = f64::INFINITY;
    for y in y1.iter().chain(&y2) {
        kink_margin = kink_margin.min(proj.kink_margin(&prep(y)));
        let z = super::unit(&proj.forward(&prep(y)));
        kink_margin = kink_margin.min(pred.kink_margin(&z));
    }

    let h = 1e-6;
    let mut numeric = Vec::with_capacity(proj.n_params());
    let mut work = proj.clone();
    for k in 0..proj.n_params() {
        let orig = *work.param_mut(k);
        *work.param_mut(k) = orig + h;
        let up = loss(&work);
        *work.param_mut(k) = orig - h;
        let down = loss(&work);
        *work.param_mut(k) = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let plain = tiny_model(norm_f, false, seed);
    let (baseline, _, _, _) = projector_grads(&plain, &x1, &x2)?;

    Ok(NormPathReport {
        analytic,
        numeric,
        loss_graph,
        loss_oracle,
        baseline,
        kink_margin,
    })
}
