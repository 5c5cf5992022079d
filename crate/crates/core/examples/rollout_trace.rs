//! Train briefly, then print one greedy episode step by step: agent state,
//! the seven scanner distances and the chosen action.
//!
//! cargo run --release --example rollout_trace

use drivelab::qlearn::{run_episode, train, Encoding, EpisodeParams, LearnConfig, RngStreams};
use drivelab::world::{RewardConfig, RoadConfig};

fn main() -> drivelab::Result<()> {
    let road = RoadConfig::default();
    let rewards = RewardConfig::default();
    let learn = LearnConfig {
        episodes: 20_000,
        v2v: true,
        ..LearnConfig::default()
    };
    let (mut table, _) = train(&road, &rewards, &learn)?;

    let mut rows = Vec::new();
    let stats = run_episode(
        &road,
        &rewards,
        &mut table,
        &EpisodeParams::greedy(Encoding::from_v2v(true)),
        &mut RngStreams::new(42),
        Some(&mut rows),
    )?;
    println!("  t lane pos spd  scan                 action        reward  event");
    for r in &rows {
        let scan: Vec<String> = r.scan.iter().map(|d| d.to_string()).collect();
        println!(
            "{:>3} {:>4} {:>3} {:>3}  [{:<18}] {:<13} {:>7.2}  {}",
            r.t,
            r.lane,
            r.pos,
            r.speed,
            scan.join(" "),
            r.action.to_string(),
            r.reward,
            r.event.as_str()
        );
    }
    println!(
        "ended with {} after {} steps",
        stats.terminal.as_str(),
        stats.steps
    );
    Ok(())
}
