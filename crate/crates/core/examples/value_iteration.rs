//! Solve the obstacle-free road exactly, then compare a model-free learner
//! with harmonic step sizes against the solution as the step budget grows.
//!
//! cargo run --release --example value_iteration

use drivelab::qlearn::{value_iteration_oracle, visit_decay_q_learning, StateKey};
use drivelab::world::{ActionPair, RewardConfig, RoadConfig};

fn main() -> drivelab::Result<()> {
    let road = RoadConfig {
        length: 10,
        n_obstacles: 0,
        ..RoadConfig::default()
    };
    let rewards = RewardConfig::default();
    let gamma = 0.95;
    let oracle = value_iteration_oracle(&road, &rewards, gamma)?;

    println!("optimal values at the start line (lane, pos 0, speed):");
    for lane in 0..road.lanes {
        for speed in 0..=road.max_agent_speed {
            let s = StateKey(vec![lane, 0, speed as i32]);
            println!("  lane {lane} speed {speed}: {:.4}", oracle.max_value(&s));
        }
    }

    for steps in [50_000u64, 500_000, 5_000_000] {
        let (q, visits) = visit_decay_q_learning(&road, &rewards, gamma, 1.0, steps, 1)?;
        let mut worst = (0.0f64, None);
        for (s, counts) in &visits {
            for a in ActionPair::all().filter(|a| counts[a.index()] > 0) {
                let err = (q.get(s, a) - oracle.get(s, a)).abs();
                if err > worst.0 {
                    worst = (err, Some((s.clone(), a)));
                }
            }
        }
        let (err, at) = worst;
        let (s, a) = at.expect("something visited");
        println!(
            "{steps:>9} steps: sup error {err:.4} at {:?} {a} (learned {:.4}, optimal {:.4})",
            s.0,
            q.get(&s, a),
            oracle.get(&s, a)
        );
    }
    Ok(())
}
