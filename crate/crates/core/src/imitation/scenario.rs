//! Scripted on-ramp merges written as floating-car data.
//!
//! Geometry, x pointing east, headings in the FCD convention (clockwise from
//! north, so east is 90°):
//!
//! ```text
//! main_1  y = +1.6  ───────────────────────────────────────────────
//! main_0  y = -1.6  ───────────────────────────────────────────────
//! accel_0 y = -4.8              ═════════════ (x 150..320)
//! ramp_0           ╱ from (0, -20)
//! ```
//!
//! The ego slows to an approach speed on the ramp, matches the speed of a
//! gap in `main_0` on the acceleration lane, changes lane and accelerates to
//! lane speed. Every `negative_every`-th scenario is a failure: alternately a
//! merge that ignores traffic and clips a mainline car, or a log that ends
//! before the merge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fcd::{Snapshot, Timestep};
use crate::error::{Error, Result};
use crate::world::{seeded_rng, SimRng};

const RAMP_START: (f64, f64) = (0.0, -20.0);
const ACCEL_Y: f64 = -4.8;
const MAIN0_Y: f64 = -1.6;
const MAIN1_Y: f64 = 1.6;
const ACCEL_START: f64 = 150.0;
const LANE_CHANGE_STEPS: usize = 4;
const END_X: f64 = 380.0;
const MAX_STEPS: usize = 400;
/// Scenarios are laid end to end in time so egos never share a timestep.
const BLOCK_SECONDS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeScenarioConfig {
    pub count: usize,
    pub seed: u64,
    pub dt: f64,
    /// Mainline cruising speed, m/s.
    pub lane_speed: f64,
    /// Speed the ego holds on the ramp before gap matching, m/s.
    pub approach_speed: f64,
    /// Ego speed when it enters the log, m/s.
    pub entry_speed: f64,
    /// Half-width of the uniform noise added to logged speeds, m/s.
    pub speed_noise: f64,
    /// 0 disables negatives.
    pub negative_every: usize,
}

impl Default for MergeScenarioConfig {
    fn default() -> Self {
        MergeScenarioConfig {
            count: 40,
            seed: 0,
            dt: 0.5,
            lane_speed: 27.0,
            approach_speed: 15.0,
            entry_speed: 22.0,
            speed_noise: 0.3,
            negative_every: 5,
        }
    }
}

impl MergeScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0)
            || !(self.approach_speed > 0.0)
            || self.lane_speed <= self.approach_speed
        {
            return Err(Error::Config(
                "need dt > 0 and 0 < approach_speed < lane_speed".into(),
            ));
        }
        Ok(())
    }

    /// Range of speeds the controller aims for, m/s.
    pub fn speed_range(&self) -> f64 {
        self.lane_speed - self.approach_speed
    }

    pub fn is_negative(&self, index: usize) -> bool {
        self.negative_every > 0 && index % self.negative_every == self.negative_every - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Merge,
    Clip,
    Abort,
}

#[derive(Debug, Clone, Copy)]
struct Car {
    x: f64,
    y: f64,
    v: f64,
}

fn heading(dx: f64, dy: f64) -> f64 {
    (90.0 - dy.atan2(dx).to_degrees()).rem_euclid(360.0)
}

fn approach(v: f64, target: f64, dt: f64, accel: f64, decel: f64) -> f64 {
    let dv = (target - v).clamp(-decel * dt, accel * dt);
    (v + dv).max(0.0)
}

struct EgoStep {
    x: f64,
    y: f64,
    v: f64,
    angle: f64,
    lane: &'static str,
}

/// Ego path; `traffic(step)` gives the `main_0` cars at that step.
fn drive_ego(
    cfg: &MergeScenarioConfig,
    rng: &mut SimRng,
    outcome: Outcome,
    traffic: &dyn Fn(usize) -> Vec<Car>,
) -> Vec<EgoStep> {
    let dt = cfg.dt;
    let approach_v = cfg.approach_speed + rng.gen_range(-1.0..1.0);
    let lane_v = cfg.lane_speed + rng.gen_range(-0.5..0.5);
    let merge_at: f64 = rng.gen_range(175.0..195.0);
    let abort_at = rng.gen_range(200.0..240.0);
    let mut ego = Car {
        x: RAMP_START.0,
        y: RAMP_START.1,
        v: cfg.entry_speed + rng.gen_range(-2.0..2.0),
    };
    let mut lane_change = 0usize;
    // (lag, lead) indices of the gap being aimed for
    let mut gap: Option<(Option<usize>, Option<usize>)> = None;
    let mut out = Vec::new();

    for step in 0..MAX_STEPS {
        let (prev_x, prev_y) = (ego.x, ego.y);
        let merged = lane_change >= LANE_CHANGE_STEPS;
        let on_ramp = ego.x < ACCEL_START;
        let cars = traffic(step);
        if !on_ramp && lane_change == 0 {
            // aim for the gap that will be beside us at the merge point
            let x_m = merge_at.max(ego.x + 10.0);
            let t = (x_m - ego.x) / ego.v.max(1.0);
            let ahead: Vec<Car> = cars
                .iter()
                .map(|c| Car {
                    x: c.x + c.v * t,
                    ..*c
                })
                .collect();
            gap = Some(pick_gap(&ahead, x_m));
        }
        let (lag, lead) = match gap {
            Some((g, l)) => (g.map(|i| cars[i]), l.map(|i| cars[i])),
            None => (None, None),
        };

        let target = if on_ramp {
            approach_v
        } else if !merged
            && outcome == Outcome::Merge
            && lag.is_some_and(|g| ego.x - g.x < 15.0 && g.v > ego.v + 3.0)
        {
            // too slow to get ahead of the lagging car, let it pass
            approach_v
        } else if !merged && outcome == Outcome::Merge {
            // sit in the middle of the chosen gap at the gap's speed
            match (lead, lag) {
                (Some(l), Some(g)) => (l.v + g.v) / 2.0 + 0.4 * ((l.x + g.x) / 2.0 - ego.x),
                (Some(l), None) => l.v + 0.4 * (l.x - 25.0 - ego.x),
                (None, Some(g)) => g.v + 0.4 * (g.x + 25.0 - ego.x),
                (None, None) => lane_v,
            }
            .clamp(approach_v, lane_v + 2.5)
        } else if merged {
            match lead {
                Some(l) if l.x > ego.x => (l.v + 0.3 * (l.x - ego.x - 20.0)).min(lane_v),
                _ => lane_v,
            }
        } else {
            approach_v + 2.0
        };
        ego.v = approach(ego.v, target, dt, 2.5, 3.0).min(30.0);
        let dist = ego.v * dt;

        if on_ramp {
            let (tx, ty) = (ACCEL_START, ACCEL_Y);
            let (dx, dy) = (tx - ego.x, ty - ego.y);
            let len = dx.hypot(dy).max(1e-9);
            let s = dist.min(len);
            ego.x += dx / len * s;
            ego.y += dy / len * s;
            if s < dist {
                ego.x += dist - s;
            }
        } else {
            let gap_ok = match outcome {
                Outcome::Merge => {
                    let closing = LANE_CHANGE_STEPS as f64 * dt;
                    lead.is_none_or(|l| l.x - ego.x > 12.0 + (ego.v - l.v).max(0.0) * closing)
                        && lag.is_none_or(|g| ego.x - g.x > 12.0 + (g.v - ego.v).max(0.0) * closing)
                }
                _ => true,
            };
            let start = match outcome {
                Outcome::Abort => false,
                _ => ego.x >= merge_at && gap_ok,
            };
            if (lane_change > 0 || start) && lane_change < LANE_CHANGE_STEPS {
                lane_change += 1;
                ego.y =
                    ACCEL_Y + (MAIN0_Y - ACCEL_Y) * lane_change as f64 / LANE_CHANGE_STEPS as f64;
            }
            ego.x += dist;
        }

        let lane = if lane_change >= LANE_CHANGE_STEPS / 2 {
            "main_0"
        } else if ego.x >= ACCEL_START {
            "accel_0"
        } else {
            "ramp_0"
        };
        let angle = if step == 0 {
            heading(ACCEL_START - RAMP_START.0, ACCEL_Y - RAMP_START.1)
        } else {
            heading(ego.x - prev_x, ego.y - prev_y)
        };
        out.push(EgoStep {
            x: ego.x,
            y: ego.y,
            v: ego.v,
            angle,
            lane,
        });
        if ego.x >= END_X || (outcome == Outcome::Abort && ego.x >= abort_at) {
            break;
        }
    }
    out
}

/// Gap in `cars` whose midpoint is nearest `x`, as (lag, lead) indices.
fn pick_gap(cars: &[Car], x: f64) -> (Option<usize>, Option<usize>) {
    let mut order: Vec<usize> = (0..cars.len()).collect();
    order.sort_by(|&a, &b| cars[a].x.total_cmp(&cars[b].x));
    let mut best = (None, order.first().copied());
    let mut best_d = f64::INFINITY;
    for k in 0..=order.len() {
        let lag = k.checked_sub(1).map(|i| order[i]);
        let lead = order.get(k).copied();
        let mid = match (lag, lead) {
            (Some(g), Some(l)) => (cars[g].x + cars[l].x) / 2.0,
            (Some(g), None) => cars[g].x + 25.0,
            (None, Some(l)) => cars[l].x - 25.0,
            (None, None) => x,
        };
        if (mid - x).abs() < best_d {
            best_d = (mid - x).abs();
            best = (lag, lead);
        }
    }
    best
}

/// Mainline traffic: five cars in `main_0`, two in `main_1`, constant speed.
fn mainline(cfg: &MergeScenarioConfig, rng: &mut SimRng) -> Vec<(String, Car)> {
    let mut cars = Vec::new();
    for j in 0..5 {
        cars.push((
            format!("m0_{j}"),
            Car {
                x: -320.0 + 75.0 * j as f64 + rng.gen_range(-10.0..10.0),
                y: MAIN0_Y,
                v: cfg.lane_speed + rng.gen_range(-1.0..1.0),
            },
        ));
    }
    for j in 0..2 {
        cars.push((
            format!("m1_{j}"),
            Car {
                x: -150.0 + 90.0 * j as f64 + rng.gen_range(-20.0..20.0),
                y: MAIN1_Y,
                v: cfg.lane_speed + 2.0 + rng.gen_range(-1.0..1.0),
            },
        ));
    }
    cars
}

fn at(car: &Car, step: usize, dt: f64) -> Car {
    Car {
        x: car.x + car.v * dt * step as f64,
        ..*car
    }
}

/// Timesteps for all scenarios, in time order. Ego ids are `ego{index}`,
/// mainline ids `s{index}_m{lane}_{j}`.
pub fn generate_merges(cfg: &MergeScenarioConfig) -> Result<Vec<Timestep>> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let mut out = Vec::new();
    let mut negatives = 0usize;
    for index in 0..cfg.count {
        let outcome = if cfg.is_negative(index) {
            negatives += 1;
            if negatives % 2 == 1 {
                Outcome::Clip
            } else {
                Outcome::Abort
            }
        } else {
            Outcome::Merge
        };
        let mut cars = mainline(cfg, &mut rng);
        let dt = cfg.dt;
        let ego = {
            let main0: Vec<Car> = cars
                .iter()
                .filter(|(id, _)| id.starts_with("m0"))
                .map(|(_, c)| *c)
                .collect();
            let traffic = move |step: usize| main0.iter().map(|c| at(c, step, dt)).collect();
            drive_ego(cfg, &mut rng, outcome, &traffic)
        };
        if outcome == Outcome::Clip {
            // put a car exactly where the lane change completes
            let k = ego
                .iter()
                .position(|e| (e.y - MAIN0_Y).abs() < 1e-9)
                .unwrap_or(ego.len() - 1);
            let v = cfg.lane_speed - 3.0;
            cars.push((
                "m0_x".into(),
                Car {
                    x: ego[k].x + rng.gen_range(-0.5..0.5) - v * dt * k as f64,
                    y: MAIN0_Y,
                    v,
                },
            ));
        }

        let t0 = index as f64 * BLOCK_SECONDS;
        for (step, e) in ego.iter().enumerate() {
            let noise = if cfg.speed_noise > 0.0 {
                rng.gen_range(-cfg.speed_noise..cfg.speed_noise)
            } else {
                0.0
            };
            let mut snapshots = vec![Snapshot {
                vehicle_id: format!("ego{index}"),
                x: e.x,
                y: e.y,
                speed: (e.v + noise).max(0.0),
                angle: e.angle,
                lane: Some(e.lane.to_string()),
            }];
            for (id, car) in &cars {
                let c = at(car, step, dt);
                snapshots.push(Snapshot {
                    vehicle_id: format!("s{index}_{id}"),
                    x: c.x,
                    y: c.y,
                    speed: c.v,
                    angle: 90.0,
                    lane: Some(if c.y > 0.0 { "main_1" } else { "main_0" }.to_string()),
                });
            }
            out.push(Timestep {
                time: t0 + step as f64 * dt,
                snapshots,
            });
        }
    }
    Ok(out)
}
