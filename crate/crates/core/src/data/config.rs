//! Declarative run configuration (JSON).

use serde::{Deserialize, Serialize};

use super::SynthKind;
use crate::error::{NsaError, Result};
use crate::nets::{FeatureMapName, Method};
use crate::scoring::{Metric, DEFAULT_SHRINKAGE};
use crate::ssl::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: SynthKind,
    pub classes: u16,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: SynthKind::Blobs,
            classes: 4,
            train_per_class: 256,
            test_per_class: 64,
            image_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Maps scored individually with every metric in `metrics`.
    pub feature_maps: Vec<FeatureMapName>,
    pub metrics: Vec<Metric>,
    pub shrinkage: f64,
    /// Fixed GDE bandwidth; median heuristic when absent.
    pub gde_bandwidth: Option<f64>,
    /// Also report the `Ens` preset over `ensemble_maps`.
    pub ensemble: bool,
    pub ensemble_maps: Vec<FeatureMapName>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            feature_maps: vec![FeatureMapName::ConvBlockPooled(4)],
            metrics: Metric::SINGLE.to_vec(),
            shrinkage: DEFAULT_SHRINKAGE,
            gde_bandwidth: None,
            ensemble: true,
            ensemble_maps: vec![
                FeatureMapName::ConvBlock(2),
                FeatureMapName::ConvBlock(3),
                FeatureMapName::ConvBlock(4),
                FeatureMapName::ConvBlockPooled(4),
                FeatureMapName::HeadLayer(1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Compute κ / MMD at the end of training.
    pub enabled: bool,
    pub feature_map: FeatureMapName,
    /// Record a per-epoch curve (AUROC, κ, MMD) every this many epochs; 0 disables.
    pub curve_every: usize,
    pub curve_metric: Metric,
    pub curve_feature_map: FeatureMapName,
    /// Seed of the uniform reference sample.
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: true,
            feature_map: FeatureMapName::ConvBlockPooled(4),
            curve_every: 0,
            curve_metric: Metric::CCos,
            curve_feature_map: FeatureMapName::ConvBlockPooled(4),
            seed: 12345,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub method: Method,
    pub norm_f: bool,
    pub norm_g: bool,
    /// Overrides `train.batch_size`.
    pub batch_size: Option<usize>,
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            method: Method::SimSiam,
            norm_f: false,
            norm_g: false,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub inlier_classes: Vec<u16>,
    pub seeds: Vec<u64>,
    pub pollution: Vec<f64>,
    /// Empty means the single variant described by `train`.
    pub variants: Vec<Variant>,
    /// Fit a linear probe on the labelled training pool.
    pub probe: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            inlier_classes: vec![0, 1, 2, 3],
            seeds: vec![0],
            pollution: vec![0.0],
            variants: Vec::new(),
            probe: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub diagnostics: DiagnosticsConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.classes < 2 {
            return Err(NsaError::config("data.classes must be at least 2"));
        }
        if self.data.image_size < 8 {
            return Err(NsaError::config("data.image_size must be at least 8"));
        }
        self.train.validate()?;
        if let Some(&c) = self.eval.inlier_classes.iter().find(|&&c| c >= self.data.classes) {
            return Err(NsaError::config(format!("inlier class {c} not below data.classes")));
        }
        if let Some(&p) = self.eval.pollution.iter().find(|p| !(0.0..=0.5).contains(*p)) {
            return Err(NsaError::config(format!("pollution ratio {p} outside [0, 0.5]")));
        }
        if !(0.0..=1.0).contains(&self.scoring.shrinkage) {
            return Err(NsaError::config("scoring.shrinkage must lie in [0, 1]"));
        }
        if self.scoring.metrics.contains(&Metric::Ens) {
            return Err(NsaError::config("list `Ens` via scoring.ensemble, not scoring.metrics"));
        }
        Ok(())
    }

    /// Variants to run, defaulting to the one described by `train`.
    pub fn variants(&self) -> Vec<Variant> {
        if self.eval.variants.is_empty() {
            vec![Variant {
                method: self.train.method,
                norm_f: self.train.norm_f,
                norm_g: self.train.norm_g,
                batch_size: None,
            }]
        } else {
            self.eval.variants.clone()
        }
    }
}
