//! Persisted models.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! b"SGMS" | u32 version | u64 header length | JSON header | f64 weights
//! ```
//!
//! The header holds everything except the weights, including the named
//! manifest and the weight count, so truncation and tampering are caught
//! before a network is built.

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig, ParamBlock};
use crate::error::{Error, Result};
use crate::pipelines::PrimerExample;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SGMS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Dynamic parameter prediction.
    Dpp,
    /// Virtual target prediction.
    Vtp,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dpp => "dpp",
            ModelKind::Vtp => "vtp",
        })
    }
}

/// Mean and standard deviation of one feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
    /// The feature had no variance; `std` was set to 1.
    pub constant: bool,
}

impl FeatureStats {
    /// Population statistics of `values`.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 && std.is_finite() {
            FeatureStats {
                mean,
                std,
                constant: false,
            }
        } else {
            FeatureStats {
                mean,
                std: 1.0,
                constant: true,
            }
        }
    }

    pub fn normalise(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalise(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Normalisation of the continuous input and target features. Binary pen
/// features are not listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub inputs: Vec<FeatureStats>,
    pub targets: Vec<FeatureStats>,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        for f in self.inputs.iter().chain(&self.targets) {
            if !(f.std > 0.0 && f.std.is_finite() && f.mean.is_finite()) {
                return Err(Error::InvalidArgument(format!("bad feature statistics {f:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    /// Range predicted onset offsets are clamped into.
    pub dt_range: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: NetworkConfig,
    pub manifest: Vec<ParamBlock>,
    pub weights: Vec<f64>,
    pub norm_stats: NormStats,
    pub training_meta: TrainingMeta,
    /// Style exemplars available for priming.
    pub primers: Vec<PrimerExample>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_kind: ModelKind,
    config: NetworkConfig,
    manifest: Vec<ParamBlock>,
    weight_count: usize,
    norm_stats: NormStats,
    training_meta: TrainingMeta,
    primers: Vec<PrimerExample>,
}

impl ModelCheckpoint {
    pub fn new(
        kind: ModelKind,
        network: Network,
        norm_stats: NormStats,
        training_meta: TrainingMeta,
        primers: Vec<PrimerExample>,
    ) -> Result<Self> {
        let ckpt = ModelCheckpoint {
            format_version: CHECKPOINT_VERSION,
            model_kind: kind,
            manifest: network.config.manifest(),
            config: network.config,
            weights: network.weights,
            norm_stats,
            training_meta,
            primers,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.manifest != self.config.manifest() {
            return Err(Error::CorruptPayload("manifest does not match the network configuration".into()));
        }
        let expected: usize = self.manifest.iter().map(ParamBlock::len).sum();
        if self.weights.len() != expected {
            return Err(Error::CorruptPayload(format!(
                "manifest describes {expected} weights, payload has {}",
                self.weights.len()
            )));
        }
        self.norm_stats.validate()
    }

    pub fn network(&self) -> Result<Network> {
        Network::new(self.config.clone(), self.weights.clone())
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.model_kind == kind {
            Ok(())
        } else {
            Err(Error::KindMismatch {
                expected: kind.to_string(),
                actual: self.model_kind.to_string(),
            })
        }
    }

    /// Primer by style label.
    pub fn primer(&self, label: &str) -> Option<&PrimerExample> {
        self.primers.iter().find(|p| p.label == label)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            format_version: self.format_version,
            model_kind: self.model_kind,
            config: self.config.clone(),
            manifest: self.manifest.clone(),
            weight_count: self.weights.len(),
            norm_stats: self.norm_stats.clone(),
            training_meta: self.training_meta.clone(),
            primers: self.primers.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.weights.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptPayload(m.to_string());
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::CorruptPayload(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with container version"));
        }
        let payload = &bytes[header_end..];
        if payload.len() != header.weight_count.saturating_mul(8) {
            return Err(Error::CorruptPayload(format!(
                "expected {} weight bytes, found {}",
                header.weight_count * 8,
                payload.len()
            )));
        }
        let weights = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ckpt = ModelCheckpoint {
            format_version: header.format_version,
            model_kind: header.model_kind,
            config: header.config,
            manifest: header.manifest,
            weights,
            norm_stats: header.norm_stats,
            training_meta: header.training_meta,
            primers: header.primers,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}
