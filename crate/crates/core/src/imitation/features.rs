//! Fixed-width feature encoding and the JSON-lines dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fcd::Snapshot;
use super::trajectory::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Neighbour slots.
    pub k: usize,
    /// Speed normaliser, m/s.
    pub v_norm: f64,
    /// Distance normaliser, metres.
    pub d_norm: f64,
    /// Targets at row `t` describe step `t + horizon`. With 1 the network
    /// predicts the next speed instead of echoing its own input.
    pub horizon: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k: 4,
            v_norm: 30.0,
            d_norm: 50.0,
            horizon: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_norm > 0.0 && self.d_norm > 0.0) {
            return Err(Error::Config("normalisers must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        1 + 2 * self.k
    }

    pub fn denormalize(&self, target: &[f64]) -> (f64, f64) {
        (target[0] * self.v_norm, target[1] * 360.0)
    }

    pub fn normalize_target(&self, speed: f64, angle: f64) -> [f64; 2] {
        [speed / self.v_norm, angle / 360.0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub id: String,
    pub encoder: EncoderConfig,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// One feature row: ego speed, then the `k` nearest neighbours as
/// (distance, speed), nearest first, ties by id, padded with (1, 0).
pub fn encode_row(ego: &Snapshot, neighbors: &[Snapshot], cfg: &EncoderConfig) -> Vec<f64> {
    let mut near: Vec<(f64, &str, f64)> = neighbors
        .iter()
        .map(|n| (ego.distance_to(n), n.vehicle_id.as_str(), n.speed))
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut row = Vec::with_capacity(cfg.feature_dim());
    row.push(unit(ego.speed / cfg.v_norm));
    for slot in 0..cfg.k {
        match near.get(slot) {
            Some(&(d, _, v)) => {
                row.push(unit(d / cfg.d_norm));
                row.push(unit(v / cfg.v_norm));
            }
            None => {
                row.push(1.0);
                row.push(0.0);
            }
        }
    }
    row
}

/// A trajectory of `n` steps yields `n - horizon` rows (none if shorter).
pub fn encode_features(traj: &Trajectory, cfg: &EncoderConfig) -> SequenceSample {
    let h = cfg.horizon;
    let rows = traj.len().saturating_sub(h);
    let mut features = Vec::with_capacity(rows);
    let mut targets = Vec::with_capacity(rows);
    for t in 0..rows {
        let step = &traj.steps[t];
        features.push(encode_row(&step.ego, &step.neighbors, cfg));
        let next = &traj.steps[t + h].ego;
        targets.push(
            cfg.normalize_target(next.speed, next.angle)
                .iter()
                .map(|&v| unit(v))
                .collect(),
        );
    }
    SequenceSample {
        id: traj.id(),
        encoder: cfg.clone(),
        features,
        targets,
    }
}

pub fn write_dataset(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SequenceSample>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SequenceSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i as u32 + 1,
            column: e.column() as u32,
            token: line.chars().take(24).collect(),
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}
