//! Encoder / projector / predictor stack with switchable L2 normalization.
//!
//! The encoder is four `3×3` conv blocks (conv, bias, ReLU; blocks 1–3 end
//! with a `2×2` average pool) followed by global average pooling. With
//! `norm_f` the pooled encoder output is L2-normalized before the projector.
//! With `norm_g` the projection is L2-normalized before it feeds both the
//! predictor and the (stop-gradient) loss target.

mod checkpoint;
mod features;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use features::FeatureMapName;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dense, Graph, ParamId, ParamStore, Tensor, Var, NORM_EPS};
use crate::error::{NsaError, Result};

/// Flattened conv maps larger than this are average-pooled before scoring.
pub const MAX_FLAT_DIM: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SimSiam,
    Byol,
    SimClr,
    /// SimCLR with rotated views as extra negatives.
    #[serde(rename = "simclr-neg")]
    SimClrNeg,
}

impl Method {
    pub fn has_predictor(self) -> bool {
        matches!(self, Method::SimSiam | Method::Byol)
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, Method::SimClr | Method::SimClrNeg)
    }

    pub fn projector_layers(self) -> usize {
        if self.is_contrastive() {
            2
        } else {
            3
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::SimSiam => "simsiam",
            Method::Byol => "byol",
            Method::SimClr => "simclr",
            Method::SimClrNeg => "simclr-neg",
        })
    }
}

impl FromStr for Method {
    type Err = NsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simsiam" | "ss" => Ok(Method::SimSiam),
            "byol" => Ok(Method::Byol),
            "simclr" | "sc" => Ok(Method::SimClr),
            "simclr-neg" | "simclrneg" | "sc-" => Ok(Method::SimClrNeg),
            other => Err(NsaError::config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Output channels of the four conv blocks; the last is the embedding width.
    pub widths: [usize; 4],
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            widths: [16, 32, 64, 128],
            proj_dim: 64,
            pred_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub norm_f: bool,
    pub norm_g: bool,
    pub arch: ArchConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(method: Method, norm_f: bool, norm_g: bool) -> Self {
        ModelConfig {
            method,
            norm_f,
            norm_g,
            arch: ArchConfig::default(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.in_channels == 0 || a.widths.contains(&0) || a.proj_dim == 0 || a.pred_hidden == 0 {
            return Err(NsaError::config(format!("zero-width layer in {a:?}")));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.widths[3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn graph(self) -> Graph {
        match self {
            Mode::Train => Graph::new(),
            Mode::Eval => Graph::inference(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    conv: Vec<Layer>,
    proj: Vec<Layer>,
    pred: Vec<Layer>,
}

impl Layout {
    /// Number of leading parameters shared with the momentum target.
    fn backbone_len(&self) -> usize {
        2 * (self.conv.len() + self.proj.len())
    }
}

/// Named activations and loss inputs from one forward pass.
#[derive(Debug)]
pub struct Trace {
    pub features: BTreeMap<FeatureMapName, Var>,
    /// `z`, or `ẑ = z/‖z‖` with `norm_g`.
    pub projection: Var,
    pub prediction: Option<Var>,
    /// Encoder output after optional `norm_f` normalization.
    pub encoder: Var,
}

#[derive(Clone, Debug)]
pub struct SslModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Momentum copy of encoder + projector (BYOL only).
    pub target: Option<ParamStore>,
    layout: Layout,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

impl SslModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let a = &config.arch;
        let mut conv = Vec::new();
        let mut c_in = a.in_channels;
        for (i, &c_out) in a.widths.iter().enumerate() {
            let w = params.add(
                format!("encoder.block{}.weight", i + 1),
                he_normal(&[c_out, c_in, 3, 3], c_in * 9, &mut rng),
            );
            let b = params.add(format!("encoder.block{}.bias", i + 1), Tensor::zeros(&[c_out]));
            conv.push(Layer { w, b });
            c_in = c_out;
        }
        let mut mlp = |prefix: &str, dims: &[usize], params: &mut ParamStore| -> Vec<Layer> {
            dims.windows(2)
                .enumerate()
                .map(|(i, io)| {
                    let w = params.add(
                        format!("{prefix}.layer{}.weight", i + 1),
                        he_normal(&[io[0], io[1]], io[0], &mut rng),
                    );
                    let b = params.add(format!("{prefix}.layer{}.bias", i + 1), Tensor::zeros(&[io[1]]));
                    Layer { w, b }
                })
                .collect()
        };
        let d_f = a.widths[3];
        let mut proj_dims = vec![d_f];
        proj_dims.extend(std::iter::repeat_n(a.proj_dim, config.method.projector_layers()));
        let proj = mlp("projector", &proj_dims, &mut params);
        let pred = if config.method.has_predictor() {
            mlp(
                "predictor",
                &[a.proj_dim, a.pred_hidden, a.pred_hidden, a.proj_dim],
                &mut params,
            )
        } else {
            Vec::new()
        };
        let layout = Layout { conv, proj, pred };
        let target = (config.method == Method::Byol).then(|| params.truncated(layout.backbone_len()));
        Ok(SslModel {
            config,
            params,
            target,
            layout,
        })
    }

    /// Number of encoder + projector parameters (the BYOL target's extent).
    pub fn backbone_len(&self) -> usize {
        self.layout.backbone_len()
    }

    pub fn predictor_params(&self) -> Vec<ParamId> {
        self.layout.pred.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn projector_params(&self) -> Vec<ParamId> {
        self.layout.proj.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.layout.conv.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(NsaError::dim(format!("expected N×C×H×W input, got {shape:?}")));
        }
        if shape[1] != self.config.arch.in_channels {
            return Err(NsaError::dim(format!(
                "model expects {} channels, input has {}",
                self.config.arch.in_channels, shape[1]
            )));
        }
        if shape[2] < 8 || shape[3] < 8 {
            return Err(NsaError::config(format!(
                "input spatial size must be at least 8x8, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Forward pass on `input` using parameters from `store` (the online
    /// parameters or the BYOL target). With `collect`, every named feature map
    /// is recorded in the trace; otherwise only the loss inputs are.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        with_predictor: bool,
        collect: bool,
    ) -> Result<Trace> {
        self.check_input(g.shape(input))?;
        let mut features = BTreeMap::new();
        let mut h = input;
        let blocks = self.layout.conv.len();
        for (i, layer) in self.layout.conv.iter().enumerate() {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            h = g.conv2d(h, w, 1, 1)?;
            h = g.add_channel_bias(h, b)?;
            h = g.relu(h);
            if i + 1 < blocks {
                h = g.avg_pool2d(h, 2)?;
            }
            if collect {
                let n = (i + 1) as u8;
                let flat = flatten_capped(g, h)?;
                features.insert(FeatureMapName::ConvBlock(n), flat);
                if i + 1 < blocks {
                    let pooled = g.global_avg_pool(h)?;
                    features.insert(FeatureMapName::ConvBlockPooled(n), pooled);
                }
            }
        }
        let y = g.global_avg_pool(h)?;
        let encoder = if self.config.norm_f {
            g.l2_normalize(y, 1, NORM_EPS)?
        } else {
            y
        };
        let mut z = encoder;
        let n_proj = self.layout.proj.len();
        for (i, layer) in self.layout.proj.iter().enumerate() {
            let w = g.param(store, layer.w);
            let b = g.param(store, layer.b);
            z = dense(g, z, w, b)?;
            if i + 1 < n_proj {
                z = g.relu(z);
            }
            if collect {
                features.insert(FeatureMapName::HeadLayer((i + 1) as u8), z);
            }
        }
        let projection = if self.config.norm_g {
            g.l2_normalize(z, 1, NORM_EPS)?
        } else {
            z
        };
        let prediction = if with_predictor && !self.layout.pred.is_empty() {
            let mut p = projection;
            let n_pred = self.layout.pred.len();
            for (i, layer) in self.layout.pred.iter().enumerate() {
                let w = g.param(&self.params, layer.w);
                let b = g.param(&self.params, layer.b);
                p = dense(g, p, w, b)?;
                if i + 1 < n_pred {
                    p = g.relu(p);
                }
            }
            Some(p)
        } else {
            None
        };
        if collect {
            features.insert(FeatureMapName::ConvBlockPooled(blocks as u8), y);
            features.insert(FeatureMapName::EncoderOutput, encoder);
        }
        Ok(Trace {
            features,
            projection,
            prediction,
            encoder,
        })
    }

    /// Every named activation for `batch` (`N×C×H×W`, already normalized).
    /// In [`Mode::Eval`] no provenance is recorded.
    pub fn forward_trace(&self, batch: &Tensor, mode: Mode) -> Result<BTreeMap<FeatureMapName, Tensor>> {
        let mut g = mode.graph();
        let x = g.constant(batch.clone());
        let trace = self.forward(&mut g, &self.params, x, false, true)?;
        Ok(trace
            .features
            .into_iter()
            .map(|(k, v)| (k, g.value(v).clone()))
            .collect())
    }

    /// Eval-mode features for a large batch, processed in chunks of `chunk` images.
    pub fn embed(&self, images: &Tensor, chunk: usize) -> Result<BTreeMap<FeatureMapName, Tensor>> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let per: usize = images.shape()[1..].iter().product();
        let mut acc: BTreeMap<FeatureMapName, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        let chunk = chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let mut shape = images.shape().to_vec();
            shape[0] = end - start;
            let part = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
            for (name, t) in self.forward_trace(&part, Mode::Eval)? {
                let entry = acc.entry(name).or_insert_with(|| (t.shape()[1..].to_vec(), Vec::new()));
                entry.1.extend_from_slice(t.data());
            }
        }
        acc.into_iter()
            .map(|(name, (tail, data))| {
                let mut shape = vec![n];
                shape.extend(tail);
                Tensor::new(shape, data).map(|t| (name, t))
            })
            .collect()
    }

    pub fn checksum(&self) -> String {
        let mut s = self.params.checksum();
        if let Some(t) = &self.target {
            s.push(':');
            s.push_str(&t.checksum());
        }
        s
    }
}

/// Flattens a `N×C×H×W` map, average-pooling by 2 while it exceeds [`MAX_FLAT_DIM`].
fn flatten_capped(g: &mut Graph, mut h: Var) -> Result<Var> {
    loop {
        let s = g.shape(h).to_vec();
        if s[1] * s[2] * s[3] <= MAX_FLAT_DIM || s[2] < 2 || s[3] < 2 {
            return g.flatten(h);
        }
        h = g.avg_pool2d(h, 2)?;
    }
}

/// `target ← m·target + (1−m)·online` for every target parameter.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(NsaError::config(format!("EMA momentum {momentum} outside [0, 1)")));
    }
    if target.len() > online.len() {
        return Err(NsaError::config("target has more parameters than the online network"));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let src = online.get(id);
        if src.shape() != target.get(id).shape() {
            return Err(NsaError::config(format!(
                "EMA shape mismatch for `{}`: {:?} vs {:?}",
                target.name(id),
                target.get(id).shape(),
                src.shape()
            )));
        }
        let dst = target.get_mut(id);
        for (t, &o) in dst.data_mut().iter_mut().zip(src.data()) {
            *t = (momentum * *t as f64 + (1.0 - momentum) * o as f64) as f32;
        }
    }
    Ok(())
}
