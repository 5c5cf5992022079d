//! Generate scripted on-ramp merges, keep the clean ones, train the LSTM
//! policy and report held-out error.
//!
//! cargo run --release --example imitation_training

use drivelab::imitation::{
    evaluate_policy, generate_merges, ingest, train_policy, EgoSelector, EncoderConfig,
    FilterConfig, MergeScenarioConfig, PolicyTrainConfig,
};

fn main() -> drivelab::Result<()> {
    let scenario = MergeScenarioConfig::default();
    let log = generate_merges(&scenario)?;
    let report = ingest(
        &log,
        &EgoSelector::IdPattern("ego*".into()),
        None,
        &FilterConfig::default(),
        &EncoderConfig::default(),
    )?;
    println!(
        "{} trajectories, {} positive",
        report.verdicts.len(),
        report.positives()
    );
    for (id, v) in report.verdicts.iter().filter(|(_, v)| !v.is_positive()) {
        println!("  rejected {id}: {v}");
    }

    let cfg = PolicyTrainConfig::default();
    let started = std::time::Instant::now();
    let trained = train_policy(&report.samples, &cfg)?;
    println!(
        "trained {} epochs in {:.1?}, best validation MSE {:.2e}",
        trained.history.epochs(),
        started.elapsed(),
        trained
            .history
            .validation
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    );

    let held_out: Vec<_> = report
        .samples
        .iter()
        .filter(|s| trained.validation_ids.contains(&s.id))
        .cloned()
        .collect();
    let eval = evaluate_policy(&trained.artifact, &held_out)?;
    println!(
        "held-out speed RMSE {:.3} m/s ({:.1}% of the {:.0} m/s controller range), angle RMSE {:.3} deg",
        eval.speed_rmse,
        100.0 * eval.speed_rmse / scenario.speed_range(),
        scenario.speed_range(),
        eval.angle_rmse
    );
    Ok(())
}
