use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NsaError, Result};

/// Named intermediate activation.
///
/// Display forms: `conv_block_3`, `conv_block_3_1x1`, `head_layer_2`,
/// `encoder_output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FeatureMapName {
    /// Flattened output of conv block `n` (1-based).
    ConvBlock(u8),
    /// Globally average-pooled output of conv block `n`.
    ConvBlockPooled(u8),
    /// Output of projector layer `n`.
    HeadLayer(u8),
    EncoderOutput,
}

impl FeatureMapName {
    /// Flattened conv maps are "2D" for ensembling purposes.
    pub fn is_spatial(self) -> bool {
        matches!(self, FeatureMapName::ConvBlock(_))
    }
}

impl fmt::Display for FeatureMapName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMapName::ConvBlock(n) => write!(f, "conv_block_{n}"),
            FeatureMapName::ConvBlockPooled(n) => write!(f, "conv_block_{n}_1x1"),
            FeatureMapName::HeadLayer(n) => write!(f, "head_layer_{n}"),
            FeatureMapName::EncoderOutput => f.write_str("encoder_output"),
        }
    }
}

impl FromStr for FeatureMapName {
    type Err = NsaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NsaError::config(format!("unknown feature map `{s}`"));
        let index = |t: &str, max: u8| -> Result<u8> {
            match t.parse::<u8>() {
                Ok(n) if (1..=max).contains(&n) => Ok(n),
                _ => Err(bad()),
            }
        };
        if s == "encoder_output" {
            return Ok(FeatureMapName::EncoderOutput);
        }
        if let Some(rest) = s.strip_prefix("conv_block_") {
            return match rest.strip_suffix("_1x1") {
                Some(n) => index(n, 4).map(FeatureMapName::ConvBlockPooled),
                None => index(rest, 4).map(FeatureMapName::ConvBlock),
            };
        }
        if let Some(n) = s.strip_prefix("head_layer_") {
            return index(n, 3).map(FeatureMapName::HeadLayer);
        }
        Err(bad())
    }
}

impl TryFrom<String> for FeatureMapName {
    type Error = NsaError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FeatureMapName> for String {
    fn from(f: FeatureMapName) -> String {
        f.to_string()
    }
}
