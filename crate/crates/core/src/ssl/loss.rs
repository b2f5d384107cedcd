//! SimSiam, BYOL and NT-Xent objectives.

use crate::autodiff::{neg_cosine, Graph, Var, NORM_EPS};
use crate::error::{NsaError, Result};
use crate::nets::Trace;

/// `½·D(p₁, sg(z₂)) + ½·D(p₂, sg(z₁))`. With `block = false` the targets are
/// not detached (debug setting used to demonstrate collapse).
pub fn symmetric_neg_cosine(g: &mut Graph, p1: Var, p2: Var, z1: Var, z2: Var, block: bool) -> Result<Var> {
    let (t1, t2) = if block {
        (g.stop_grad(z1), g.stop_grad(z2))
    } else {
        (z1, z2)
    };
    let a = neg_cosine(g, p1, t2)?;
    let b = neg_cosine(g, p2, t1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn prediction(t: &Trace) -> Result<Var> {
    t.prediction
        .ok_or_else(|| NsaError::config("loss needs a predictor output; the model has no predictor"))
}

/// SimSiam loss between two traces of the same model on two views.
pub fn simsiam_loss(g: &mut Graph, view1: &Trace, view2: &Trace) -> Result<Var> {
    let (p1, p2) = (prediction(view1)?, prediction(view2)?);
    symmetric_neg_cosine(g, p1, p2, view1.projection, view2.projection, true)
}

/// BYOL loss. `target1`/`target2` are the momentum network's projections of
/// the two views; they are detached regardless of how they were produced.
pub fn byol_loss(g: &mut Graph, online1: &Trace, online2: &Trace, target1: Option<Var>, target2: Option<Var>) -> Result<Var> {
    let (p1, p2) = (prediction(online1)?, prediction(online2)?);
    let missing = || NsaError::config("BYOL loss needs target projections");
    symmetric_neg_cosine(g, p1, p2, target1.ok_or_else(missing)?, target2.ok_or_else(missing)?, true)
}

/// NT-Xent over `z: [2N×d]`, where row `i` and row `i+N` are the two views of
/// one image. `shifted` appends extra rows that only ever act as negatives,
/// with their rotation ids; rows with rotation 0 are not distribution-shifted
/// and are excluded from every denominator.
pub fn simclr_loss(g: &mut Graph, z: Var, tau: f64, shifted: Option<(Var, &[u8])>) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(NsaError::config(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[0] % 2 != 0 || shape[0] < 4 {
        return Err(NsaError::dim(format!("NT-Xent needs a [2N×d] batch with N >= 2, got {shape:?}")));
    }
    let rows = shape[0];
    let n = rows / 2;
    let anchors = g.l2_normalize(z, 1, NORM_EPS)?;
    let (keys, extra) = match shifted {
        Some((r, rot)) => {
            if g.shape(r).first() != Some(&rot.len()) {
                return Err(NsaError::dim("one rotation id per shifted row required"));
            }
            let rn = g.l2_normalize(r, 1, NORM_EPS)?;
            (g.concat_rows(&[anchors, rn])?, rot)
        }
        None => (anchors, &[][..]),
    };
    let cols = rows + extra.len();
    let sim = g.matmul_t(anchors, false, keys, true)?;
    let logits = g.scale(sim, (1.0 / tau) as f32);
    let mut exclude = vec![false; rows * cols];
    for i in 0..rows {
        exclude[i * cols + i] = true;
        for (j, &r) in extra.iter().enumerate() {
            if r % 4 == 0 {
                exclude[i * cols + rows + j] = true;
            }
        }
    }
    let targets: Vec<Option<usize>> = (0..rows).map(|i| Some((i + n) % rows)).collect();
    g.softmax_cross_entropy(logits, &targets, Some(&exclude))
}
