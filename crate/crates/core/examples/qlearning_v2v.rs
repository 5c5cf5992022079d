//! Train the tabular agent with and without V2V speed sharing on the same
//! seeds and compare the final metrics bucket.
//!
//! cargo run --release --example qlearning_v2v -- [episodes]

use drivelab::qlearn::{train, LearnConfig};
use drivelab::world::{RewardConfig, RoadConfig};

fn main() -> drivelab::Result<()> {
    let episodes: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30_000);
    let road = RoadConfig::default();
    let rewards = RewardConfig::default();
    println!("seed  v2v  crash  quick  timeout  mean steps to goal");
    for seed in 1..=3 {
        for v2v in [false, true] {
            let learn = LearnConfig {
                episodes,
                seed,
                v2v,
                ..LearnConfig::default()
            };
            let (table, buckets) = train(&road, &rewards, &learn)?;
            let last = buckets.last().expect("one bucket at least");
            println!(
                "{seed:>4}  {:>3}  {:.3}  {:.3}  {:.3}    {}   ({} states)",
                if v2v { "yes" } else { "no" },
                last.crash_rate,
                last.quick_rate,
                last.timeout_rate,
                last.avg_time_to_goal
                    .map_or("n/a".into(), |v| format!("{v:.2}")),
                table.len()
            );
        }
    }
    Ok(())
}
