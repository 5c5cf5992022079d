//! Tabular Q-learning on the two-lane road.
//!
//! The agent observes its own speed plus the seven scanner distances, and with
//! V2V enabled also the speed of the nearest vehicle along each ray. Training
//! uses ε-greedy exploration with a linear schedule; two independent PRNG
//! streams (world spawning, exploration) keep V2V and non-V2V runs paired.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{
    self, apply_action, neighbor_speeds, reward, scan, seeded_rng, spawn_world, ActionPair, Event,
    RewardConfig, RoadConfig, ScannerReading, SimRng, VehicleState, WorldState, N_ACTIONS,
};

/// Sentinel for "no vehicle seen on this ray" in V2V keys.
pub const NO_NEIGHBOR: i32 = -1;

/// Quick finish threshold, in time steps.
pub const QUICK_STEPS: u32 = 40;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(pub Vec<i32>);

impl StateKey {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How a world is turned into a table key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// speed + 7 scanner distances
    Scanner,
    /// speed + 7 distances + 7 neighbour speeds
    ScannerV2v,
    /// `(lane, pos, speed)`; the fully observed MDP state, used by the
    /// value-iteration oracle on obstacle-free roads.
    Exact,
}

impl Encoding {
    pub fn from_v2v(v2v: bool) -> Self {
        if v2v {
            Encoding::ScannerV2v
        } else {
            Encoding::Scanner
        }
    }

    pub fn key_len(self) -> usize {
        match self {
            Encoding::Scanner => 8,
            Encoding::ScannerV2v => 15,
            Encoding::Exact => 3,
        }
    }
}

pub fn encode_state(
    speed: u32,
    scan: &ScannerReading,
    neighbor_speeds: Option<&[Option<u32>; 7]>,
    v2v: bool,
) -> StateKey {
    let mut key = Vec::with_capacity(if v2v { 15 } else { 8 });
    key.push(speed as i32);
    key.extend(scan.dist.iter().map(|&d| d as i32));
    if v2v {
        let none = [None; 7];
        let speeds = neighbor_speeds.unwrap_or(&none);
        key.extend(speeds.iter().map(|s| s.map_or(NO_NEIGHBOR, |v| v as i32)));
    }
    StateKey(key)
}

pub fn exact_key(agent: &VehicleState) -> StateKey {
    StateKey(vec![agent.lane, agent.pos, agent.speed as i32])
}

pub fn observe(world: &WorldState, cfg: &RoadConfig, encoding: Encoding) -> StateKey {
    match encoding {
        Encoding::Exact => exact_key(&world.agent),
        Encoding::Scanner => encode_state(world.agent.speed, &scan(world, cfg), None, false),
        Encoding::ScannerV2v => {
            let speeds = neighbor_speeds(world, cfg);
            encode_state(world.agent.speed, &scan(world, cfg), Some(&speeds), true)
        }
    }
}

pub type QRow = [f64; N_ACTIONS];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QTable {
    pub v2v: bool,
    entries: HashMap<StateKey, QRow>,
}

const QTABLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct QTableFile {
    version: u32,
    v2v: bool,
    entries: Vec<QEntry>,
}

#[derive(Serialize, Deserialize)]
struct QEntry {
    key: Vec<i32>,
    q: Vec<f64>,
}

impl QTable {
    pub fn new(v2v: bool) -> Self {
        QTable {
            v2v,
            entries: HashMap::new(),
        }
    }

    /// Unvisited states read as all zeros.
    pub fn row(&self, s: &StateKey) -> QRow {
        self.entries.get(s).copied().unwrap_or([0.0; N_ACTIONS])
    }

    pub fn get(&self, s: &StateKey, a: ActionPair) -> f64 {
        self.entries.get(s).map_or(0.0, |r| r[a.index()])
    }

    pub fn set(&mut self, s: &StateKey, a: ActionPair, value: f64) {
        self.entries.entry(s.clone()).or_insert([0.0; N_ACTIONS])[a.index()] = value;
    }

    pub fn max_value(&self, s: &StateKey) -> f64 {
        self.row(s).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &QRow)> {
        self.entries.iter()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut entries: Vec<_> = self.entries.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let file = QTableFile {
            version: QTABLE_VERSION,
            v2v: self.v2v,
            entries: entries
                .into_iter()
                .map(|(k, q)| QEntry {
                    key: k.0.clone(),
                    q: q.to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: QTableFile = serde_json::from_str(text)?;
        if file.version != QTABLE_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: QTABLE_VERSION,
            });
        }
        let expected_len = Encoding::from_v2v(file.v2v).key_len();
        let mut table = QTable::new(file.v2v);
        for e in file.entries {
            if e.key.len() != expected_len {
                return Err(Error::Config(format!(
                    "q-table key has {} components, expected {expected_len}",
                    e.key.len()
                )));
            }
            let row: QRow = e.q.as_slice().try_into().map_err(|_| {
                Error::Config(format!("q-table row has {} values, expected 9", e.q.len()))
            })?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("q-table contains non-finite values".into()));
            }
            table.entries.insert(StateKey(e.key), row);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

/// One temporal-difference update of `Q(s, a)`. The bootstrap term is zero
/// when `terminal` is set. Returns the new value.
#[allow(clippy::too_many_arguments)]
pub fn q_update(
    q: &mut QTable,
    s: &StateKey,
    a: ActionPair,
    r: f64,
    s_next: &StateKey,
    terminal: bool,
    alpha: f64,
    gamma: f64,
) -> f64 {
    let future = if terminal { 0.0 } else { q.max_value(s_next) };
    let sample = r + gamma * future;
    let value = (1.0 - alpha) * q.get(s, a) + alpha * sample;
    q.set(s, a, value);
    value
}

/// Uniform integer in `0..n` from one 64-bit draw (multiply-shift).
fn uniform_index(rng: &mut SimRng, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

fn argmax_set(row: &QRow) -> Vec<usize> {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..N_ACTIONS).filter(|&i| row[i] == best).collect()
}

/// ε-greedy choice with uniform tie-breaking. Always consumes exactly three
/// 64-bit draws so that runs differing only in their Q-values stay aligned
/// on the exploration stream.
pub fn select_action(q: &QTable, s: &StateKey, epsilon: f64, rng: &mut SimRng) -> ActionPair {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let explore = uniform_index(rng, N_ACTIONS);
    let tie = rng.next_u64();
    if u < epsilon {
        return ActionPair::from_index(explore).unwrap();
    }
    let best = argmax_set(&q.row(s));
    let pick = ((tie as u128 * best.len() as u128) >> 64) as usize;
    ActionPair::from_index(best[pick]).unwrap()
}

/// Deterministic greedy choice: lowest index among the maxima.
pub fn greedy_action(q: &QTable, s: &StateKey) -> ActionPair {
    ActionPair::from_index(argmax_set(&q.row(s))[0]).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub episodes: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: u64,
    pub seed: u64,
    pub v2v: bool,
    pub bucket: u64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            alpha: 0.4,
            gamma: 0.95,
            episodes: 100_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 20_000,
            seed: 1,
            v2v: false,
            bucket: 1000,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0 <= self.epsilon_end
            && self.epsilon_end <= self.epsilon_start
            && self.epsilon_start <= 1.0)
        {
            return bad("need 0 <= epsilon_end <= epsilon_start <= 1");
        }
        if self.bucket == 0 {
            return bad("bucket must be >= 1");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon_at(&self, episode: u64) -> f64 {
        if self.epsilon_decay_episodes == 0 || episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let frac = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// The two PRNG streams of a run. The exploration stream is the world
/// stream advanced by a xoshiro jump (2^128 draws), so they never overlap.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub world: SimRng,
    pub explore: SimRng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let world = seeded_rng(seed);
        let mut explore = world.clone();
        explore.jump();
        RngStreams { world, explore }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: u32,
    pub terminal: Event,
    pub quick: bool,
}

impl EpisodeStats {
    pub fn timed_out(&self) -> bool {
        self.terminal == Event::Alive
    }
}

/// One row of a rollout trace: the state the agent acted in, what it saw,
/// what it did and what happened.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: u32,
    pub lane: i32,
    pub pos: i32,
    pub speed: u32,
    pub scan: [u32; 7],
    pub action: ActionPair,
    pub reward: f64,
    pub event: Event,
}

/// Per-episode learning parameters.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeParams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub encoding: Encoding,
    pub learn: bool,
}

impl EpisodeParams {
    pub fn greedy(encoding: Encoding) -> Self {
        EpisodeParams {
            alpha: 0.0,
            gamma: 0.0,
            epsilon: 0.0,
            encoding,
            learn: false,
        }
    }
}

/// Spawn a world from the world stream and drive it until a terminal event
/// or `max_steps`. With `learn` off the agent acts greedily (lowest-index
/// tie-break) and the table is left untouched.
pub fn run_episode(
    road: &RoadConfig,
    rewards: &RewardConfig,
    q: &mut QTable,
    params: &EpisodeParams,
    rngs: &mut RngStreams,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EpisodeStats> {
    let mut world = spawn_world(road, &mut rngs.world)?;
    let mut state = observe(&world, road, params.encoding);
    let mut event = Event::Alive;

    while world.step < road.max_steps {
        let action = if params.learn {
            select_action(q, &state, params.epsilon, &mut rngs.explore)
        } else {
            greedy_action(q, &state)
        };
        let out = apply_action(&world, action, road);
        let lane = if out.event == Event::Bump {
            world.agent.lane
        } else {
            out.next.agent.lane
        };
        let r = reward(out.event, action, out.next.agent.speed, lane, rewards, road);
        let next_state = observe(&out.next, road, params.encoding);
        let terminal = out.event.is_terminal() || out.next.step >= road.max_steps;
        if params.learn {
            q_update(
                q,
                &state,
                action,
                r,
                &next_state,
                terminal,
                params.alpha,
                params.gamma,
            );
        }
        if let Some(rows) = trace.as_deref_mut() {
            rows.push(TraceRow {
                t: world.step,
                lane: world.agent.lane,
                pos: world.agent.pos,
                speed: world.agent.speed,
                scan: scan(&world, road).dist,
                action,
                reward: r,
                event: out.event,
            });
        }
        world = out.next;
        state = next_state;
        event = out.event;
        if event.is_terminal() {
            break;
        }
    }

    Ok(EpisodeStats {
        steps: world.step,
        terminal: event,
        quick: event == Event::Goal && world.step < QUICK_STEPS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBucket {
    pub bucket_index: usize,
    pub episodes: u64,
    /// `None` when no episode in the bucket reached the goal.
    pub avg_time_to_goal: Option<f64>,
    pub crash_rate: f64,
    pub quick_rate: f64,
    pub timeout_rate: f64,
    /// Exploration rate at the first episode of the bucket.
    pub epsilon: f64,
}

impl MetricsBucket {
    pub fn from_episodes(bucket_index: usize, epsilon: f64, stats: &[EpisodeStats]) -> Self {
        let n = stats.len() as f64;
        let goals: Vec<u32> = stats
            .iter()
            .filter(|s| s.terminal == Event::Goal)
            .map(|s| s.steps)
            .collect();
        let count = |f: fn(&EpisodeStats) -> bool| stats.iter().filter(|s| f(s)).count() as f64 / n;
        MetricsBucket {
            bucket_index,
            episodes: stats.len() as u64,
            avg_time_to_goal: (!goals.is_empty())
                .then(|| goals.iter().map(|&s| s as f64).sum::<f64>() / goals.len() as f64),
            crash_rate: count(|s| s.terminal.is_failure()),
            quick_rate: count(|s| s.quick),
            timeout_rate: count(|s| s.timed_out()),
            epsilon,
        }
    }

    pub fn goal_rate(&self) -> f64 {
        1.0 - self.crash_rate - self.timeout_rate
    }
}

pub const METRICS_HEADER: &str =
    "bucket,episodes,avg_time_to_goal,crash_rate,quick_rate,timeout_rate,epsilon";

pub fn write_metrics_csv<W: Write>(mut out: W, buckets: &[MetricsBucket]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for b in buckets {
        let avg = b
            .avg_time_to_goal
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            b.bucket_index, b.episodes, avg, b.crash_rate, b.quick_rate, b.timeout_rate, b.epsilon
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub table: QTable,
    pub buckets: Vec<MetricsBucket>,
    pub episodes: Vec<EpisodeStats>,
}

pub fn train(
    road: &RoadConfig,
    rewards: &RewardConfig,
    learn: &LearnConfig,
) -> Result<(QTable, Vec<MetricsBucket>)> {
    let out = train_detailed(road, rewards, learn)?;
    Ok((out.table, out.buckets))
}

/// Like [`train`], also returning every episode's statistics.
pub fn train_detailed(
    road: &RoadConfig,
    rewards: &RewardConfig,
    learn: &LearnConfig,
) -> Result<TrainOutcome> {
    road.validate()?;
    learn.validate()?;
    let mut table = QTable::new(learn.v2v);
    let mut rngs = RngStreams::new(learn.seed);
    let mut episodes = Vec::with_capacity(learn.episodes as usize);
    let mut buckets = Vec::new();
    let mut bucket_start = 0usize;
    let encoding = Encoding::from_v2v(learn.v2v);

    for ep in 0..learn.episodes {
        let params = EpisodeParams {
            alpha: learn.alpha,
            gamma: learn.gamma,
            epsilon: learn.epsilon_at(ep),
            encoding,
            learn: true,
        };
        episodes.push(run_episode(
            road, rewards, &mut table, &params, &mut rngs, None,
        )?);
        let done = ep + 1;
        if done % learn.bucket == 0 || done == learn.episodes {
            buckets.push(MetricsBucket::from_episodes(
                buckets.len(),
                learn.epsilon_at(bucket_start as u64),
                &episodes[bucket_start..],
            ));
            bucket_start = episodes.len();
        }
    }
    Ok(TrainOutcome {
        table,
        buckets,
        episodes,
    })
}

/// Visit counts per state-action pair.
pub type VisitCounts = HashMap<StateKey, [u64; N_ACTIONS]>;

/// Model-free counterpart of [`value_iteration_oracle`]: uniformly random
/// actions, step size `n(s, a)^-omega` (`omega = 1` is the harmonic `1/n`),
/// exact `(lane, pos, speed)` keys, `steps` transitions in total. Episodes cut off by `max_steps` bootstrap from their
/// last state, so the fixed point is the same infinite-horizon value.
pub fn visit_decay_q_learning(
    road: &RoadConfig,
    rewards: &RewardConfig,
    gamma: f64,
    omega: f64,
    steps: u64,
    seed: u64,
) -> Result<(QTable, VisitCounts)> {
    road.validate()?;
    if !(omega > 0.5 && omega <= 1.0) {
        return Err(Error::Config(format!(
            "omega must lie in (0.5, 1], got {omega}"
        )));
    }
    let mut q = QTable::new(false);
    let mut visits = VisitCounts::new();
    let mut rngs = RngStreams::new(seed);
    let mut world = spawn_world(road, &mut rngs.world)?;
    for _ in 0..steps {
        let s = exact_key(&world.agent);
        let a = ActionPair::from_index(uniform_index(&mut rngs.explore, N_ACTIONS)).unwrap();
        let out = apply_action(&world, a, road);
        let lane = if out.event == Event::Bump {
            world.agent.lane
        } else {
            out.next.agent.lane
        };
        let r = reward(out.event, a, out.next.agent.speed, lane, rewards, road);
        let n = &mut visits.entry(s.clone()).or_insert([0; N_ACTIONS])[a.index()];
        *n += 1;
        let alpha = (*n as f64).powf(-omega);
        q_update(
            &mut q,
            &s,
            a,
            r,
            &exact_key(&out.next.agent),
            out.event.is_terminal(),
            alpha,
            gamma,
        );
        world = if out.event.is_terminal() || out.next.step >= road.max_steps {
            spawn_world(road, &mut rngs.world)?
        } else {
            out.next
        };
    }
    Ok((q, visits))
}

/// Exact optimal action values of the obstacle-free road, computed by
/// synchronous Bellman backups over every `(lane, pos, speed)` state until
/// the sup-norm change drops below `1e-10`. Keys use [`Encoding::Exact`].
pub fn value_iteration_oracle(
    road: &RoadConfig,
    rewards: &RewardConfig,
    gamma: f64,
) -> Result<QTable> {
    if road.n_obstacles != 0 {
        return Err(Error::Config(
            "value iteration needs an obstacle-free road".into(),
        ));
    }
    road.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config("gamma must lie in [0, 1)".into()));
    }

    // Deterministic transition model: (reward, successor index or None).
    let mut states = Vec::new();
    for lane in 0..road.lanes {
        for pos in 0..road.length {
            for speed in 0..=road.max_agent_speed {
                states.push(VehicleState::new(lane, pos, speed));
            }
        }
    }
    let index_of = |v: &VehicleState| -> usize {
        ((v.lane * road.length + v.pos) as usize) * (road.max_agent_speed as usize + 1)
            + v.speed as usize
    };
    let model: Vec<[(f64, Option<usize>); N_ACTIONS]> = states
        .iter()
        .map(|s| {
            let w = WorldState {
                agent: *s,
                obstacles: Vec::new(),
                step: 0,
            };
            let mut row = [(0.0, None); N_ACTIONS];
            for a in ActionPair::all() {
                let out = apply_action(&w, a, road);
                let lane = if out.event == Event::Bump {
                    s.lane
                } else {
                    out.next.agent.lane
                };
                let r = world::reward(out.event, a, out.next.agent.speed, lane, rewards, road);
                let succ = (!out.event.is_terminal()).then(|| index_of(&out.next.agent));
                row[a.index()] = (r, succ);
            }
            row
        })
        .collect();

    let mut q = vec![[0.0; N_ACTIONS]; states.len()];
    loop {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut residual = 0.0f64;
        for (qs, ms) in q.iter_mut().zip(&model) {
            for (qa, &(r, succ)) in qs.iter_mut().zip(ms) {
                let new = r + gamma * succ.map_or(0.0, |j| v[j]);
                residual = residual.max((new - *qa).abs());
                *qa = new;
            }
        }
        if residual < 1e-10 {
            break;
        }
    }

    let mut table = QTable::new(false);
    for (s, row) in states.iter().zip(q) {
        table.entries.insert(exact_key(s), row);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Direction, SpeedChange};

    fn key(v: &[i32]) -> StateKey {
        StateKey(v.to_vec())
    }

    fn stay() -> ActionPair {
        ActionPair::new(Direction::Stay, SpeedChange::Keep)
    }

    #[test]
    fn encode_without_v2v_has_eight_components() {
        let scan = ScannerReading {
            dist: [5, 5, 5, 0, 1, 5, 5],
        };
        let k = encode_state(1, &scan, None, false);
        assert_eq!(k.0, vec![1, 5, 5, 5, 0, 1, 5, 5]);
    }

    #[test]
    fn encode_with_v2v_pads_with_sentinel() {
        let scan = ScannerReading {
            dist: [5, 5, 5, 0, 1, 5, 5],
        };
        let k = encode_state(1, &scan, Some(&[None; 7]), true);
        assert_eq!(k.len(), 15);
        assert!(k.0[8..].iter().all(|&v| v == NO_NEIGHBOR));
    }

    #[test]
    fn v2v_distinguishes_neighbor_speeds() {
        let scan = ScannerReading {
            dist: [2, 5, 5, 0, 1, 5, 5],
        };
        let mut a = [None; 7];
        let mut b = [None; 7];
        a[0] = Some(1);
        b[0] = Some(2);
        assert_eq!(
            encode_state(1, &scan, Some(&a), false),
            encode_state(1, &scan, Some(&b), false)
        );
        assert_ne!(
            encode_state(1, &scan, Some(&a), true),
            encode_state(1, &scan, Some(&b), true)
        );
    }

    #[test]
    fn q_update_substitution() {
        let mut q = QTable::new(false);
        let (s, s2) = (key(&[0]), key(&[1]));
        q.set(&s2, stay(), 1.0);
        let v = q_update(&mut q, &s, stay(), 0.1, &s2, false, 0.4, 0.95);
        assert!((v - 0.42).abs() < 1e-12);
        assert_eq!(q.get(&s2, stay()), 1.0);
    }

    #[test]
    fn q_update_with_zero_alpha_is_a_fixed_point() {
        let mut q = QTable::new(false);
        let (s, s2) = (key(&[0]), key(&[1]));
        q.set(&s, stay(), 0.7);
        q.set(&s2, stay(), 3.0);
        for r in [-10.0, 0.0, 5.5] {
            assert_eq!(q_update(&mut q, &s, stay(), r, &s2, false, 0.0, 0.95), 0.7);
        }
    }

    #[test]
    fn q_update_terminal_ignores_successor() {
        let mut q = QTable::new(false);
        let (s, s2) = (key(&[0]), key(&[1]));
        q.set(&s, stay(), 1.0);
        q.set(&s2, stay(), 100.0);
        let v = q_update(&mut q, &s, stay(), -10.0, &s2, true, 0.4, 0.95);
        assert!((v - -3.4).abs() < 1e-12);
    }

    #[test]
    fn q_update_touches_one_entry_and_converges() {
        let mut q = QTable::new(false);
        let (s, s2) = (key(&[0]), key(&[1]));
        q.set(&s2, stay(), 2.0);
        let before = q.row(&s2);
        let a = ActionPair::from_index(7).unwrap();
        let target = 0.3 + 0.9 * 2.0;
        let mut gap = (q.get(&s, a) - target).abs();
        for _ in 0..50 {
            q_update(&mut q, &s, a, 0.3, &s2, false, 0.5, 0.9);
            let g = (q.get(&s, a) - target).abs();
            assert!((g - 0.5 * gap).abs() < 1e-12);
            gap = g;
        }
        assert_eq!(q.row(&s2), before);
        let row = q.row(&s);
        assert!(row.iter().enumerate().all(|(i, &v)| i == 7 || v == 0.0));
    }

    #[test]
    fn greedy_with_unique_max() {
        let mut q = QTable::new(false);
        let s = key(&[3]);
        q.set(&s, ActionPair::from_index(4).unwrap(), 1.0);
        let mut rng = seeded_rng(5);
        for _ in 0..100 {
            assert_eq!(select_action(&q, &s, 0.0, &mut rng).index(), 4);
        }
        assert_eq!(greedy_action(&q, &s).index(), 4);
    }

    #[test]
    fn all_zero_row_ties_uniformly() {
        let q = QTable::new(false);
        let s = key(&[3]);
        let mut rng = seeded_rng(9);
        let mut counts = [0u32; 9];
        for _ in 0..9000 {
            counts[select_action(&q, &s, 0.0, &mut rng).index()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 800 && c < 1200), "{counts:?}");
        assert_eq!(greedy_action(&q, &s).index(), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        // chi-square goodness of fit, 8 degrees of freedom; 26.12 is the
        // 0.999 quantile.
        let mut q = QTable::new(false);
        let s = key(&[0]);
        q.set(&s, stay(), 5.0);
        let mut rng = seeded_rng(2024);
        let n = 100_000;
        let mut counts = [0f64; 9];
        for _ in 0..n {
            counts[select_action(&q, &s, 1.0, &mut rng).index()] += 1.0;
        }
        let expected = n as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| (c - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 26.12, "chi2 = {chi2}, counts = {counts:?}");
        let sigma = (n as f64 * (1.0 / 9.0) * (8.0 / 9.0)).sqrt();
        assert!(counts.iter().all(|c| (c - expected).abs() < 3.0 * sigma));
    }

    #[test]
    fn argmax_invariant_under_row_shift() {
        let mut q = QTable::new(false);
        let s = key(&[1]);
        let vals = [0.3, -1.0, 2.5, 2.5, 0.0, -7.0, 1.0, 2.4, 0.1];
        for (i, v) in vals.iter().enumerate() {
            q.set(&s, ActionPair::from_index(i).unwrap(), *v);
        }
        let before = greedy_action(&q, &s);
        for c in [-100.0, -0.5, 3.0, 1e6] {
            let mut shifted = QTable::new(false);
            for (i, v) in vals.iter().enumerate() {
                shifted.set(&s, ActionPair::from_index(i).unwrap(), v + c);
            }
            assert_eq!(greedy_action(&shifted, &s), before);
        }
    }

    #[test]
    fn epsilon_schedule() {
        let c = LearnConfig::default();
        assert_eq!(c.epsilon_at(0), 1.0);
        assert!((c.epsilon_at(10_000) - 0.525).abs() < 1e-12);
        assert_eq!(c.epsilon_at(20_000), 0.05);
        assert_eq!(c.epsilon_at(99_999), 0.05);
    }

    #[test]
    fn zero_step_episode() {
        let road = RoadConfig {
            max_steps: 0,
            length: 2,
            n_obstacles: 0,
            ..RoadConfig::default()
        };
        // validate() rejects this bound, run_episode itself does not need it
        let mut q = QTable::new(false);
        let stats = run_episode(
            &road,
            &RewardConfig::default(),
            &mut q,
            &EpisodeParams::greedy(Encoding::Scanner),
            &mut RngStreams::new(1),
            None,
        )
        .unwrap();
        assert_eq!(
            stats,
            EpisodeStats {
                steps: 0,
                terminal: Event::Alive,
                quick: false
            }
        );
    }

    #[test]
    fn greedy_episodes_are_reproducible() {
        let road = RoadConfig::default();
        let learn = LearnConfig {
            episodes: 300,
            ..LearnConfig::default()
        };
        let (mut q, _) = train(&road, &RewardConfig::default(), &learn).unwrap();
        let snapshot = q.clone();
        let run = |q: &mut QTable| {
            run_episode(
                &road,
                &RewardConfig::default(),
                q,
                &EpisodeParams::greedy(Encoding::Scanner),
                &mut RngStreams::new(77),
                None,
            )
            .unwrap()
        };
        assert_eq!(run(&mut q), run(&mut q));
        assert_eq!(q, snapshot);
    }

    #[test]
    fn train_with_zero_episodes() {
        let learn = LearnConfig {
            episodes: 0,
            ..LearnConfig::default()
        };
        let (q, buckets) = train(&RoadConfig::default(), &RewardConfig::default(), &learn).unwrap();
        assert!(q.is_empty());
        assert!(buckets.is_empty());
    }

    #[test]
    fn bucket_rates_partition_episodes() {
        let learn = LearnConfig {
            episodes: 2500,
            bucket: 1000,
            ..LearnConfig::default()
        };
        let (_, buckets) = train(&RoadConfig::default(), &RewardConfig::default(), &learn).unwrap();
        assert_eq!(buckets.len(), 3);
        assert_eq!(buckets[2].episodes, 500);
        for b in &buckets {
            let goal = b.goal_rate();
            assert!((0.0..=1.0).contains(&goal));
            assert!(b.quick_rate <= goal + 1e-12);
            assert!((b.crash_rate + goal + b.timeout_rate - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn v2v_and_plain_runs_see_identical_worlds() {
        let road = RoadConfig::default();
        let mut a = RngStreams::new(11);
        let mut b = RngStreams::new(11);
        let mut qa = QTable::new(false);
        let mut qb = QTable::new(true);
        for ep in 0..50 {
            let pa = EpisodeParams {
                alpha: 0.4,
                gamma: 0.95,
                epsilon: 0.3,
                encoding: Encoding::Scanner,
                learn: true,
            };
            let pb = EpisodeParams {
                encoding: Encoding::ScannerV2v,
                ..pa
            };
            run_episode(&road, &RewardConfig::default(), &mut qa, &pa, &mut a, None).unwrap();
            run_episode(&road, &RewardConfig::default(), &mut qb, &pb, &mut b, None).unwrap();
            let wa = spawn_world(&road, &mut a.world.clone()).unwrap();
            let wb = spawn_world(&road, &mut b.world.clone()).unwrap();
            assert_eq!(wa, wb, "episode {ep}");
        }
    }

    #[test]
    fn qtable_json_round_trip() {
        let mut q = QTable::new(true);
        let s = StateKey((0..15).collect());
        q.set(&s, stay(), 0.1 + 0.2);
        q.set(&s, ActionPair::from_index(0).unwrap(), -1.0 / 3.0);
        let back = QTable::from_json(&q.to_json().unwrap()).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.get(&s, stay()).to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn qtable_rejects_bad_files() {
        assert!(matches!(
            QTable::from_json(r#"{"version":2,"v2v":false,"entries":[]}"#),
            Err(Error::Version { found: 2, .. })
        ));
        assert!(QTable::from_json(
            r#"{"version":1,"v2v":false,"entries":[{"key":[1,2],"q":[0,0,0,0,0,0,0,0,0]}]}"#
        )
        .is_err());
        assert!(QTable::from_json(
            r#"{"version":1,"v2v":false,"entries":[{"key":[1,2,3,4,5,6,7,8],"q":[0]}]}"#
        )
        .is_err());
    }

    #[test]
    fn metrics_csv_format() {
        let buckets = vec![
            MetricsBucket {
                bucket_index: 0,
                episodes: 10,
                avg_time_to_goal: None,
                crash_rate: 1.0,
                quick_rate: 0.0,
                timeout_rate: 0.0,
                epsilon: 1.0,
            },
            MetricsBucket {
                bucket_index: 1,
                episodes: 10,
                avg_time_to_goal: Some(24.5),
                crash_rate: 0.5,
                quick_rate: 0.25,
                timeout_rate: 0.0,
                epsilon: 0.05,
            },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &buckets).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,10,,1,0,0,1");
        assert_eq!(lines[2], "1,10,24.5,0.5,0.25,0,0.05");
    }

    /// Road of length 2 with top speed 1 and both lanes limited to 1.
    fn tiny_road() -> RoadConfig {
        RoadConfig {
            length: 2,
            lane_speed_limit: vec![1, 1],
            agent_speed_limit: None,
            max_agent_speed: 1,
            n_obstacles: 0,
            max_steps: 10,
            ..RoadConfig::default()
        }
    }

    #[test]
    fn oracle_on_two_cell_road_matches_hand_backup() {
        let road = tiny_road();
        let gamma = 0.9;
        let q = value_iteration_oracle(&road, &RewardConfig::default(), gamma).unwrap();
        let a = |d, s| ActionPair::new(d, s);
        use Direction::*;
        use SpeedChange::*;
        // (lane 0, pos 1, speed 1): Stay/Keep reaches the goal, 0.1 + 0.1.
        let s = StateKey(vec![0, 1, 1]);
        assert!((q.get(&s, a(Stay, Keep)) - 0.2).abs() < 1e-9);
        // Left bumps: -10 - 0.1 - 1.
        assert!((q.get(&s, a(Left, Keep)) - -11.1).abs() < 1e-9);
        // Right/Keep moves to (1, 2): goal, 0.1 - 0.1 + 0.1.
        assert!((q.get(&s, a(Right, Keep)) - 0.1).abs() < 1e-9);
        // (0, 1, 0) Stay/Dec stays put forever: 0.1 / (1 - gamma).
        let parked = StateKey(vec![0, 1, 0]);
        assert!((q.get(&parked, a(Stay, Dec)) - 1.0).abs() < 1e-8);
        // V(0, 1, 1) = max(finish 0.2, park 0.1 + gamma * 1.0) = 1.0
        let v_near = 0.2f64.max(0.1 + gamma * 1.0);
        assert!((q.max_value(&s) - v_near).abs() < 1e-8);
        // V(0, 0, 0) = max(park forever 1.0, Inc -> 0.2 + gamma * v_near = 1.1)
        let v_stopped = 1.0f64.max(0.2 + gamma * v_near);
        assert!((q.max_value(&StateKey(vec![0, 0, 0])) - v_stopped).abs() < 1e-8);
        let start = StateKey(vec![0, 0, 1]);
        assert!((q.get(&start, a(Stay, Dec)) - (0.1 + gamma * v_stopped)).abs() < 1e-8);
        assert!((q.get(&start, a(Stay, Keep)) - (0.2 + gamma * v_near)).abs() < 1e-8);
    }

    #[test]
    fn oracle_rejects_obstacles() {
        let road = RoadConfig::default();
        assert!(value_iteration_oracle(&road, &RewardConfig::default(), 0.95).is_err());
    }

    #[test]
    fn oracle_is_a_bellman_fixed_point() {
        let road = RoadConfig {
            length: 10,
            n_obstacles: 0,
            ..RoadConfig::default()
        };
        let rewards = RewardConfig::default();
        let gamma = 0.95;
        let q = value_iteration_oracle(&road, &rewards, gamma).unwrap();
        let mut residual = 0.0f64;
        for (k, row) in q.iter() {
            let agent = VehicleState::new(k.0[0], k.0[1], k.0[2] as u32);
            let w = WorldState {
                agent,
                obstacles: vec![],
                step: 0,
            };
            for a in ActionPair::all() {
                let out = apply_action(&w, a, &road);
                let lane = if out.event == Event::Bump {
                    agent.lane
                } else {
                    out.next.agent.lane
                };
                let r = reward(out.event, a, out.next.agent.speed, lane, &rewards, &road);
                let boot = if out.event.is_terminal() {
                    0.0
                } else {
                    q.max_value(&exact_key(&out.next.agent))
                };
                residual = residual.max((row[a.index()] - (r + gamma * boot)).abs());
            }
        }
        assert!(residual < 1e-9, "residual {residual}");
    }

    #[test]
    fn visit_decay_learner_is_exact_on_terminal_pairs() {
        let road = RoadConfig {
            length: 10,
            n_obstacles: 0,
            ..RoadConfig::default()
        };
        let rewards = RewardConfig::default();
        let oracle = value_iteration_oracle(&road, &rewards, 0.95).unwrap();
        let (q, visits) = visit_decay_q_learning(&road, &rewards, 0.95, 1.0, 20_000, 3).unwrap();
        let mut checked = 0;
        for (k, counts) in &visits {
            let agent = VehicleState::new(k.0[0], k.0[1], k.0[2] as u32);
            let w = WorldState {
                agent,
                obstacles: vec![],
                step: 0,
            };
            for a in ActionPair::all() {
                if counts[a.index()] > 0 && apply_action(&w, a, &road).event.is_terminal() {
                    assert!((q.get(k, a) - oracle.get(k, a)).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn visit_decay_learner_is_seeded() {
        let road = RoadConfig {
            length: 10,
            n_obstacles: 0,
            ..RoadConfig::default()
        };
        let rewards = RewardConfig::default();
        let a = visit_decay_q_learning(&road, &rewards, 0.95, 1.0, 5_000, 9).unwrap();
        let b = visit_decay_q_learning(&road, &rewards, 0.95, 1.0, 5_000, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(visit_decay_q_learning(&road, &rewards, 0.95, 0.5, 10, 9).is_err());
    }
}
