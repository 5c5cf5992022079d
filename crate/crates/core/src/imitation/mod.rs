//! Roadside imitation pipeline: FCD logs to ego trajectories, positive merges
//! to fixed-width sequences, sequences to a trained policy artifact.

pub mod fcd;
pub mod features;
pub mod policy;
pub mod scenario;
pub mod trajectory;

pub use fcd::{parse_fcd, write_fcd, Snapshot, Timestep};
pub use features::{encode_features, read_dataset, write_dataset, EncoderConfig, SequenceSample};
pub use policy::{
    evaluate_policy, train_policy, write_eval_csv, EvalReport, PolicyArtifact, PolicyTrainConfig,
    TrainedPolicy,
};
pub use scenario::{generate_merges, MergeScenarioConfig};
pub use trajectory::{
    classify_positive, extract_ego_sequences, EgoSelector, FilterConfig, MergeZone, Trajectory,
    Verdict, Window,
};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub samples: Vec<SequenceSample>,
    /// Every extracted trajectory id with its verdict, positives included.
    pub verdicts: Vec<(String, Verdict)>,
}

impl IngestReport {
    pub fn positives(&self) -> usize {
        self.verdicts
            .iter()
            .filter(|(_, v)| v.is_positive())
            .count()
    }
}

/// Extract, classify and encode in one pass.
pub fn ingest(
    timesteps: &[Timestep],
    selector: &EgoSelector,
    window: Option<Window>,
    filter: &FilterConfig,
    encoder: &EncoderConfig,
) -> Result<IngestReport> {
    filter.validate()?;
    encoder.validate()?;
    let mut samples = Vec::new();
    let mut verdicts = Vec::new();
    for traj in extract_ego_sequences(timesteps, selector, window) {
        let verdict = classify_positive(&traj, filter);
        if verdict.is_positive() {
            let s = encode_features(&traj, encoder);
            if !s.is_empty() {
                samples.push(s);
            }
        }
        verdicts.push((traj.id(), verdict));
    }
    Ok(IngestReport { samples, verdicts })
}
