//! Policy training, evaluation and the portable artifact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{EncoderConfig, SequenceSample};
use crate::error::{Error, Result};
use crate::rnn::{fit, Example, FitConfig, LossHistory, ModelConfig, Params, SeqModel, Sequence};
use crate::world::seeded_rng;

pub const ARTIFACT_VERSION: u32 = 1;

/// Everything the checksum covers, in serialisation order.
#[derive(Serialize)]
struct Payload<'a> {
    format_version: u32,
    model: &'a ModelConfig,
    encoder: &'a EncoderConfig,
    params: &'a Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArtifact {
    pub format_version: u32,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub params: Params,
    /// CRC32 of the compact JSON encoding of the other four fields.
    pub checksum: u32,
}

impl PolicyArtifact {
    pub fn new(model: &SeqModel, encoder: EncoderConfig) -> Self {
        let mut a = PolicyArtifact {
            format_version: ARTIFACT_VERSION,
            model: model.config,
            encoder,
            params: model.params.clone(),
            checksum: 0,
        };
        a.checksum = a.compute_checksum();
        a
    }

    pub fn compute_checksum(&self) -> u32 {
        let payload = Payload {
            format_version: self.format_version,
            model: &self.model,
            encoder: &self.encoder,
            params: &self.params,
        };
        // serialising plain structs of numbers cannot fail
        let bytes = serde_json::to_vec(&payload).expect("payload serialises");
        crc32fast::hash(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serialises")
    }

    /// Version is checked before the checksum so that files from a newer
    /// format report the version rather than a spurious corruption.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Artifact(format!("truncated or malformed JSON: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Artifact("missing format_version".into()))?;
        if version != ARTIFACT_VERSION as u64 {
            return Err(Error::Version {
                found: version.min(u32::MAX as u64) as u32,
                expected: ARTIFACT_VERSION,
            });
        }
        let a: PolicyArtifact =
            serde_json::from_value(value).map_err(|e| Error::Artifact(e.to_string()))?;
        let computed = a.compute_checksum();
        if computed != a.checksum {
            return Err(Error::Checksum {
                stored: a.checksum,
                computed,
            });
        }
        a.model.validate()?;
        if !a.params.shape_matches(&Params::zeros(&a.model)) {
            return Err(Error::Artifact(
                "parameter shapes do not match model config".into(),
            ));
        }
        if a.model.input_dim != a.encoder.feature_dim() || a.model.output_dim != 2 {
            return Err(Error::EncoderMismatch(format!(
                "model maps {} -> {}, encoder needs {} -> 2",
                a.model.input_dim,
                a.model.output_dim,
                a.encoder.feature_dim()
            )));
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_model(&self) -> SeqModel {
        SeqModel {
            config: self.model,
            params: self.params.clone(),
        }
    }

    /// Normalised outputs for a normalised feature sequence.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Sequence> {
        self.to_model().predict(features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyTrainConfig {
    /// Fraction of sequences used for training; the rest validate.
    pub split: f64,
    pub hidden_dim: usize,
    /// Seeds the split and the weight initialisation.
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        PolicyTrainConfig {
            split: 0.8,
            hidden_dim: 32,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub artifact: PolicyArtifact,
    pub history: LossHistory,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

fn check_encoder(samples: &[SequenceSample], encoder: &EncoderConfig) -> Result<()> {
    for s in samples {
        if &s.encoder != encoder {
            return Err(Error::EncoderMismatch(format!(
                "sample `{}` was encoded with {:?}, expected {:?}",
                s.id, s.encoder, encoder
            )));
        }
        if s.is_empty() {
            return Err(Error::Shape(format!("sample `{}` has no steps", s.id)));
        }
    }
    Ok(())
}

fn example(s: &SequenceSample) -> Example {
    Example {
        inputs: s.features.clone(),
        targets: s.targets.clone(),
    }
}

/// Deterministic split into (train, validation) index lists. At least one
/// sequence lands on each side.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let validation = idx.split_off(n_train.min(n));
    (idx, validation)
}

pub fn train_policy(samples: &[SequenceSample], cfg: &PolicyTrainConfig) -> Result<TrainedPolicy> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 sequences, got {}",
            samples.len()
        )));
    }
    if !(cfg.split > 0.0 && cfg.split < 1.0) {
        return Err(Error::Config(format!(
            "split must be in (0, 1), got {}",
            cfg.split
        )));
    }
    let encoder = samples[0].encoder.clone();
    encoder.validate()?;
    check_encoder(samples, &encoder)?;

    let (tr, va) = split_indices(samples.len(), cfg.split, cfg.seed);
    let train: Vec<Example> = tr.iter().map(|&i| example(&samples[i])).collect();
    let validation: Vec<Example> = va.iter().map(|&i| example(&samples[i])).collect();

    let model = SeqModel::new(ModelConfig {
        input_dim: encoder.feature_dim(),
        hidden_dim: cfg.hidden_dim,
        output_dim: 2,
        seed: cfg.seed,
    })?;
    let (best, history) = fit(model, &train, &validation, &cfg.fit)?;
    Ok(TrainedPolicy {
        artifact: PolicyArtifact::new(&best, encoder),
        history,
        train_ids: tr.iter().map(|&i| samples[i].id.clone()).collect(),
        validation_ids: va.iter().map(|&i| samples[i].id.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sequence_id: String,
    pub t: usize,
    pub actual_speed: f64,
    pub predicted_speed: f64,
    pub actual_angle: f64,
    pub predicted_angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// m/s
    pub speed_rmse: f64,
    /// degrees
    pub angle_rmse: f64,
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: &str =
    "sequence_id,t,actual_speed,predicted_speed,actual_angle,predicted_angle";

/// RMSE over every step of every sample, in physical units.
pub fn evaluate_policy(
    artifact: &PolicyArtifact,
    samples: &[SequenceSample],
) -> Result<EvalReport> {
    check_encoder(samples, &artifact.encoder)?;
    let model = artifact.to_model();
    let enc = &artifact.encoder;
    let mut rows = Vec::new();
    let (mut se_speed, mut se_angle) = (0.0, 0.0);
    for s in samples {
        let pred = model.predict(&s.features)?;
        for (t, (p, y)) in pred.iter().zip(&s.targets).enumerate() {
            let (ps, pa) = enc.denormalize(p);
            let (ys, ya) = enc.denormalize(y);
            se_speed += (ps - ys).powi(2);
            se_angle += (pa - ya).powi(2);
            rows.push(EvalRow {
                sequence_id: s.id.clone(),
                t,
                actual_speed: ys,
                predicted_speed: ps,
                actual_angle: ya,
                predicted_angle: pa,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no steps to evaluate".into()));
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        speed_rmse: (se_speed / n).sqrt(),
        angle_rmse: (se_angle / n).sqrt(),
        rows,
    })
}

pub fn write_eval_csv(w: &mut impl Write, rows: &[EvalRow]) -> std::io::Result<()> {
    writeln!(w, "{EVAL_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.sequence_id,
            r.t,
            r.actual_speed,
            r.predicted_speed,
            r.actual_angle,
            r.predicted_angle
        )?;
    }
    Ok(())
}
