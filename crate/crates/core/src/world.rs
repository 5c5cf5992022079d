//! Discrete two-lane road micro-simulation.
//!
//! The road is a grid of `lanes × length` cells. Lane 0 is the left (normal)
//! lane, lane 1 the overtaking lane. Obstacle vehicles travel at the speed of
//! their lane for the whole episode; the learning agent picks one of nine
//! `(direction, speed)` actions per step.

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seedable PRNG used everywhere in the crate. `seed_from_u64` expands the
/// seed through splitmix64, so a seed fully determines the stream.
pub type SimRng = Xoshiro256PlusPlus;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadConfig {
    pub length: i32,
    pub lanes: i32,
    /// Cruising speed of obstacle traffic in each lane.
    pub lane_speed_limit: Vec<u32>,
    /// Speed above which the agent is penalised, per lane. Falls back to
    /// `lane_speed_limit` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_speed_limit: Option<Vec<u32>>,
    pub max_agent_speed: u32,
    pub scan_range: u32,
    pub n_obstacles: u32,
    pub max_steps: u32,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig {
            length: 66,
            lanes: 2,
            lane_speed_limit: vec![1, 2],
            agent_speed_limit: Some(vec![1, 3]),
            max_agent_speed: 3,
            scan_range: 5,
            n_obstacles: 6,
            max_steps: 200,
        }
    }
}

impl RoadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.length < 2 {
            return bad(format!("length must be >= 2, got {}", self.length));
        }
        if self.lanes != 2 {
            return bad(format!("only 2 lanes are supported, got {}", self.lanes));
        }
        if self.lane_speed_limit.len() != self.lanes as usize {
            return bad("lane_speed_limit needs one entry per lane".into());
        }
        for &s in &self.lane_speed_limit {
            if s < 1 || s > self.max_agent_speed {
                return bad(format!(
                    "lane speed {s} outside [1, max_agent_speed={}]",
                    self.max_agent_speed
                ));
            }
        }
        if let Some(limits) = &self.agent_speed_limit {
            if limits.len() != self.lanes as usize {
                return bad("agent_speed_limit needs one entry per lane".into());
            }
            if limits.iter().any(|&s| s < 1 || s > self.max_agent_speed) {
                return bad("agent_speed_limit entries must lie in [1, max_agent_speed]".into());
            }
        }
        if self.scan_range < 1 {
            return bad("scan_range must be >= 1".into());
        }
        if self.max_agent_speed < 1 {
            return bad("max_agent_speed must be >= 1".into());
        }
        // max_steps >= length / max_agent_speed
        if (self.max_steps as i64) * (self.max_agent_speed as i64) < self.length as i64 {
            return bad(format!(
                "max_steps={} too small to cover length={} at speed {}",
                self.max_steps, self.length, self.max_agent_speed
            ));
        }
        Ok(())
    }

    /// Speed limit the reward function applies to the agent in `lane`.
    pub fn agent_limit(&self, lane: i32) -> u32 {
        let limits = self
            .agent_speed_limit
            .as_deref()
            .unwrap_or(&self.lane_speed_limit);
        limits[lane as usize]
    }

    pub fn on_road(&self, lane: i32) -> bool {
        (0..self.lanes).contains(&lane)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VehicleState {
    pub lane: i32,
    pub pos: i32,
    pub speed: u32,
}

impl VehicleState {
    pub fn new(lane: i32, pos: i32, speed: u32) -> Self {
        VehicleState { lane, pos, speed }
    }

    pub fn cell(&self) -> (i32, i32) {
        (self.lane, self.pos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent: VehicleState,
    pub obstacles: Vec<VehicleState>,
    pub step: u32,
}

impl WorldState {
    pub fn obstacle_at(&self, lane: i32, pos: i32) -> Option<&VehicleState> {
        self.obstacles
            .iter()
            .find(|o| o.lane == lane && o.pos == pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Stay,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeedChange {
    Dec,
    Keep,
    Inc,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Left, Direction::Stay, Direction::Right];

    fn lane_offset(self) -> i32 {
        match self {
            Direction::Left => -1,
            Direction::Stay => 0,
            Direction::Right => 1,
        }
    }
}

impl SpeedChange {
    pub const ALL: [SpeedChange; 3] = [SpeedChange::Dec, SpeedChange::Keep, SpeedChange::Inc];
}

/// One of the nine `(direction, speed change)` actions. Indexed row-major:
/// `index = 3 * dir + spd` with `Left < Stay < Right` and `Dec < Keep < Inc`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionPair {
    pub dir: Direction,
    pub spd: SpeedChange,
}

pub const N_ACTIONS: usize = 9;

impl ActionPair {
    pub fn new(dir: Direction, spd: SpeedChange) -> Self {
        ActionPair { dir, spd }
    }

    pub fn index(self) -> usize {
        3 * self.dir as usize + self.spd as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        if i >= N_ACTIONS {
            return None;
        }
        Some(ActionPair {
            dir: Direction::ALL[i / 3],
            spd: SpeedChange::ALL[i % 3],
        })
    }

    pub fn all() -> impl Iterator<Item = ActionPair> {
        (0..N_ACTIONS).map(|i| ActionPair::from_index(i).unwrap())
    }
}

impl std::fmt::Display for ActionPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}-{:?}", self.dir, self.spd)
    }
}

/// Scanner ray directions, in reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ray {
    Front,
    FrontLeft,
    FrontRight,
    Left,
    Right,
    RearLeft,
    RearRight,
}

impl Ray {
    pub const ALL: [Ray; 7] = [
        Ray::Front,
        Ray::FrontLeft,
        Ray::FrontRight,
        Ray::Left,
        Ray::Right,
        Ray::RearLeft,
        Ray::RearRight,
    ];

    /// (lane offset, longitudinal step) of the ray.
    fn geometry(self) -> (i32, i32) {
        match self {
            Ray::Front => (0, 1),
            Ray::FrontLeft => (-1, 1),
            Ray::FrontRight => (1, 1),
            Ray::Left => (-1, 0),
            Ray::Right => (1, 0),
            Ray::RearLeft => (-1, -1),
            Ray::RearRight => (1, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScannerReading {
    pub dist: [u32; 7],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Event {
    Alive,
    Goal,
    Crash,
    Bump,
}

impl Event {
    pub fn is_terminal(self) -> bool {
        self != Event::Alive
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Event::Crash | Event::Bump)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Event::Alive => "alive",
            Event::Goal => "goal",
            Event::Crash => "crash",
            Event::Bump => "bump",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub next: WorldState,
    pub event: Event,
    pub traversed: Vec<(i32, i32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alive_or_goal: f64,
    pub shift_penalty: f64,
    pub crash_or_bump: f64,
    pub speed_bonus_divisor: f64,
    pub overspeed_factor: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alive_or_goal: 0.1,
            shift_penalty: -0.1,
            crash_or_bump: -10.0,
            speed_bonus_divisor: 10.0,
            overspeed_factor: 2.0,
        }
    }
}

/// Place the agent at the start line and scatter `n_obstacles` vehicles over
/// distinct cells with `pos >= 4`.
pub fn spawn_world(cfg: &RoadConfig, rng: &mut SimRng) -> Result<WorldState> {
    const FIRST_OBSTACLE_POS: i32 = 4;
    let span = (cfg.length - FIRST_OBSTACLE_POS).max(0) as usize;
    let available = span * cfg.lanes as usize;
    let n = cfg.n_obstacles as usize;
    if n > available {
        return Err(Error::Spawn {
            requested: n,
            available,
        });
    }
    let mut obstacles: Vec<VehicleState> = index::sample(rng, available, n)
        .into_iter()
        .map(|cell| {
            let lane = (cell / span) as i32;
            let pos = FIRST_OBSTACLE_POS + (cell % span) as i32;
            VehicleState::new(lane, pos, cfg.lane_speed_limit[lane as usize])
        })
        .collect();
    obstacles.sort_by_key(|o| (o.lane, o.pos));
    Ok(WorldState {
        agent: VehicleState::new(0, 0, 1),
        obstacles,
        step: 0,
    })
}

/// Walk one ray and return `(free cells before the first hit, speed of the
/// vehicle hit, if any)`.
pub(crate) fn cast_ray(world: &WorldState, cfg: &RoadConfig, ray: Ray) -> (u32, Option<u32>) {
    let range = cfg.scan_range;
    let a = world.agent;
    let (dl, dp) = ray.geometry();
    let lane = a.lane + dl;

    if dp == 0 {
        // Lateral rays only ever see the adjacent cell on a two-lane road.
        if !cfg.on_road(lane) {
            return (0, None);
        }
        return match world.obstacle_at(lane, a.pos) {
            Some(o) => (0, Some(o.speed)),
            None => (1.min(range), None),
        };
    }
    // A diagonal ray into a non-existent lane sees nothing.
    if !cfg.on_road(lane) {
        return (range, None);
    }
    for k in 1..=range {
        let pos = a.pos + dp * k as i32;
        if pos < 0 {
            return (k - 1, None);
        }
        if let Some(o) = world.obstacle_at(lane, pos) {
            return (k - 1, Some(o.speed));
        }
    }
    (range, None)
}

pub fn scan(world: &WorldState, cfg: &RoadConfig) -> ScannerReading {
    let mut dist = [0; 7];
    for (d, ray) in dist.iter_mut().zip(Ray::ALL) {
        *d = cast_ray(world, cfg, ray).0;
    }
    ScannerReading { dist }
}

/// Speed of the nearest vehicle along each ray, `None` when the ray sees no
/// vehicle within range. This is what the agent learns over V2V.
pub fn neighbor_speeds(world: &WorldState, cfg: &RoadConfig) -> [Option<u32>; 7] {
    let mut out = [None; 7];
    for (s, ray) in out.iter_mut().zip(Ray::ALL) {
        *s = cast_ray(world, cfg, ray).1;
    }
    out
}

/// Advance the world by one time step.
///
/// Obstacles move first. The agent then updates its speed, changes lane and
/// sweeps forward; a crash is any overlap between the swept cells (or the
/// final cell) and the post-move obstacle cells.
pub fn apply_action(world: &WorldState, action: ActionPair, cfg: &RoadConfig) -> StepOutcome {
    let mut next = world.clone();
    next.step += 1;

    for o in next.obstacles.iter_mut() {
        o.pos += o.speed as i32;
    }
    next.obstacles.retain(|o| o.pos < cfg.length);

    let agent = &mut next.agent;
    agent.speed = match action.spd {
        SpeedChange::Dec => agent.speed.saturating_sub(1),
        SpeedChange::Keep => agent.speed,
        SpeedChange::Inc => (agent.speed + 1).min(cfg.max_agent_speed),
    };

    let target_lane = agent.lane + action.dir.lane_offset();
    if !cfg.on_road(target_lane) {
        return StepOutcome {
            next,
            event: Event::Bump,
            traversed: Vec::new(),
        };
    }
    agent.lane = target_lane;
    let start = agent.pos;
    let traversed: Vec<(i32, i32)> = (1..=agent.speed as i32)
        .map(|k| (target_lane, start + k))
        .collect();
    agent.pos += agent.speed as i32;
    let final_cell = agent.cell();

    let hit = |cell: &(i32, i32)| next.obstacle_at(cell.0, cell.1).is_some();
    let event = if traversed.iter().any(hit) || hit(&final_cell) {
        Event::Crash
    } else if next.agent.pos >= cfg.length {
        Event::Goal
    } else {
        Event::Alive
    };
    StepOutcome {
        next,
        event,
        traversed,
    }
}

/// The three additive reward components: outcome, lateral shift, speed.
pub fn reward_components(
    event: Event,
    action: ActionPair,
    agent_speed: u32,
    agent_lane: i32,
    reward: &RewardConfig,
    road: &RoadConfig,
) -> [f64; 3] {
    let failed = event.is_failure();
    let base = if failed {
        reward.crash_or_bump
    } else {
        reward.alive_or_goal
    };
    let shift = if action.dir == Direction::Stay {
        0.0
    } else {
        reward.shift_penalty
    };
    let speed = agent_speed as f64;
    let speed_term = if agent_speed <= road.agent_limit(agent_lane) {
        if failed {
            -speed
        } else {
            speed / reward.speed_bonus_divisor
        }
    } else {
        -reward.overspeed_factor * speed
    };
    [base, shift, speed_term]
}

pub fn reward(
    event: Event,
    action: ActionPair,
    agent_speed: u32,
    agent_lane: i32,
    reward: &RewardConfig,
    road: &RoadConfig,
) -> f64 {
    reward_components(event, action, agent_speed, agent_lane, reward, road)
        .iter()
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn world(agent: VehicleState, obstacles: Vec<VehicleState>) -> WorldState {
        WorldState {
            agent,
            obstacles,
            step: 0,
        }
    }

    fn act(dir: Direction, spd: SpeedChange) -> ActionPair {
        ActionPair::new(dir, spd)
    }

    /// Reward tests pin the agent limit to the lane speeds.
    fn lane_limited_road() -> RoadConfig {
        RoadConfig {
            agent_speed_limit: None,
            ..RoadConfig::default()
        }
    }

    // Independent cell-by-cell ray walk used as the scanner oracle.
    fn brute_scan(w: &WorldState, cfg: &RoadConfig) -> [u32; 7] {
        let occupied =
            |lane: i32, pos: i32| w.obstacles.iter().any(|o| o.lane == lane && o.pos == pos);
        let a = w.agent;
        let r = cfg.scan_range as i32;
        let forward = |lane: i32, step: i32| -> u32 {
            if !(0..=1).contains(&lane) {
                return cfg.scan_range;
            }
            let mut free = 0;
            let mut p = a.pos;
            loop {
                p += step;
                if free == r || p < 0 || occupied(lane, p) {
                    return free as u32;
                }
                free += 1;
            }
        };
        let lateral = |lane: i32| -> u32 {
            if !(0..=1).contains(&lane) || occupied(lane, a.pos) {
                0
            } else {
                1
            }
        };
        [
            forward(a.lane, 1),
            forward(a.lane - 1, 1),
            forward(a.lane + 1, 1),
            lateral(a.lane - 1),
            lateral(a.lane + 1),
            forward(a.lane - 1, -1),
            forward(a.lane + 1, -1),
        ]
    }

    #[test]
    fn action_indexing_is_a_bijection() {
        let all: Vec<_> = ActionPair::all().collect();
        assert_eq!(all.len(), 9);
        for (i, a) in all.iter().enumerate() {
            assert_eq!(a.index(), i);
        }
        assert!(all.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ActionPair::from_index(9), None);
        assert_eq!(
            ActionPair::from_index(4),
            Some(act(Direction::Stay, SpeedChange::Keep))
        );
    }

    #[test]
    fn config_validation() {
        assert!(RoadConfig::default().validate().is_ok());
        let mut c = RoadConfig::default();
        c.lanes = 3;
        assert!(c.validate().is_err());
        let mut c = RoadConfig::default();
        c.lane_speed_limit = vec![1, 4];
        assert!(c.validate().is_err());
        let mut c = RoadConfig::default();
        c.max_steps = 10;
        assert!(c.validate().is_err());
        let mut c = RoadConfig::default();
        c.length = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg: RoadConfig = serde_json::from_str(r#"{"length": 20, "n_obstacles": 2}"#).unwrap();
        assert_eq!(cfg.length, 20);
        assert_eq!(cfg.n_obstacles, 2);
        assert_eq!(cfg.lane_speed_limit, vec![1, 2]);
        let r: RewardConfig = serde_json::from_str(r#"{"crash_or_bump": -5.0}"#).unwrap();
        assert_eq!(r.crash_or_bump, -5.0);
        assert_eq!(r.alive_or_goal, 0.1);
        assert!(serde_json::from_str::<RoadConfig>(r#"{"lenght": 3}"#).is_err());
    }

    #[test]
    fn spawn_without_obstacles() {
        let cfg = RoadConfig {
            n_obstacles: 0,
            ..RoadConfig::default()
        };
        let w = spawn_world(&cfg, &mut seeded_rng(3)).unwrap();
        assert!(w.obstacles.is_empty());
        assert_eq!(w.agent, VehicleState::new(0, 0, 1));
    }

    #[test]
    fn spawn_is_deterministic() {
        let cfg = RoadConfig::default();
        let a = spawn_world(&cfg, &mut seeded_rng(42)).unwrap();
        let b = spawn_world(&cfg, &mut seeded_rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spawn_rejects_infeasible_config() {
        let cfg = RoadConfig {
            length: 6,
            n_obstacles: 5,
            max_steps: 10,
            ..RoadConfig::default()
        };
        // only 2 lanes x 2 cells are available
        let err = spawn_world(&cfg, &mut seeded_rng(0)).unwrap_err();
        assert!(matches!(
            err,
            Error::Spawn {
                requested: 5,
                available: 4
            }
        ));
    }

    #[test]
    fn spawn_postconditions_hold_over_many_seeds() {
        let cfg = RoadConfig::default();
        for seed in 0..10_000 {
            let w = spawn_world(&cfg, &mut seeded_rng(seed)).unwrap();
            assert_eq!(w.obstacles.len(), 6);
            let mut cells: Vec<_> = w.obstacles.iter().map(|o| o.cell()).collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 6, "seed {seed}: duplicate cells");
            for o in &w.obstacles {
                assert!((4..cfg.length).contains(&o.pos));
                assert!(!(o.lane == 0 && o.pos <= 3));
                assert_eq!(o.speed, cfg.lane_speed_limit[o.lane as usize]);
            }
        }
    }

    #[test]
    fn scan_on_empty_road() {
        let cfg = RoadConfig::default();
        let w = world(VehicleState::new(0, 30, 1), vec![]);
        assert_eq!(scan(&w, &cfg).dist, [5, 5, 5, 0, 1, 5, 5]);
        let w = world(VehicleState::new(1, 30, 1), vec![]);
        assert_eq!(scan(&w, &cfg).dist, [5, 5, 5, 1, 0, 5, 5]);
    }

    #[test]
    fn scan_front_distance() {
        let cfg = RoadConfig::default();
        let w = world(
            VehicleState::new(0, 30, 1),
            vec![VehicleState::new(0, 32, 1)],
        );
        assert_eq!(scan(&w, &cfg).dist[0], 1);
    }

    #[test]
    fn scan_rear_rays_stop_at_start_line() {
        let cfg = RoadConfig::default();
        let w = world(VehicleState::new(0, 2, 1), vec![]);
        assert_eq!(scan(&w, &cfg).dist[6], 2);
    }

    #[test]
    fn neighbor_speeds_follow_rays() {
        let cfg = RoadConfig::default();
        let w = world(
            VehicleState::new(0, 30, 1),
            vec![VehicleState::new(0, 33, 1), VehicleState::new(1, 30, 2)],
        );
        let s = neighbor_speeds(&w, &cfg);
        assert_eq!(s[0], Some(1));
        assert_eq!(s[4], Some(2));
        assert_eq!(s[3], None);
        assert_eq!(scan(&w, &cfg).dist[4], 0);
    }

    #[test]
    fn unobstructed_advance() {
        let cfg = RoadConfig::default();
        let w = world(VehicleState::new(0, 10, 1), vec![]);
        let out = apply_action(&w, act(Direction::Stay, SpeedChange::Keep), &cfg);
        assert_eq!(out.next.agent, VehicleState::new(0, 11, 1));
        assert_eq!(out.event, Event::Alive);
        assert_eq!(out.traversed, vec![(0, 11)]);
        assert_eq!(out.next.step, 1);
    }

    #[test]
    fn left_from_left_lane_bumps() {
        let cfg = RoadConfig::default();
        let w = world(VehicleState::new(0, 10, 1), vec![]);
        let out = apply_action(&w, act(Direction::Left, SpeedChange::Keep), &cfg);
        assert_eq!(out.event, Event::Bump);
        assert_eq!(out.next.agent.cell(), (0, 10));
    }

    #[test]
    fn accelerating_into_a_slower_obstacle_crashes() {
        let cfg = RoadConfig::default();
        let w = world(
            VehicleState::new(0, 10, 2),
            vec![VehicleState::new(0, 12, 1)],
        );
        let out = apply_action(&w, act(Direction::Stay, SpeedChange::Inc), &cfg);
        assert_eq!(out.next.obstacles[0].pos, 13);
        assert_eq!(out.next.agent.speed, 3);
        assert_eq!(out.traversed, vec![(0, 11), (0, 12), (0, 13)]);
        assert_eq!(out.event, Event::Crash);
    }

    #[test]
    fn sideways_move_into_occupied_cell_crashes() {
        let cfg = RoadConfig::default();
        // obstacle at (1, 8) moves to (1, 10); agent at speed 0 shifts right
        let w = world(
            VehicleState::new(0, 10, 1),
            vec![VehicleState::new(1, 8, 2)],
        );
        let out = apply_action(&w, act(Direction::Right, SpeedChange::Dec), &cfg);
        assert_eq!(out.event, Event::Crash);
    }

    #[test]
    fn goal_and_despawn() {
        let cfg = RoadConfig::default();
        let w = world(
            VehicleState::new(1, 64, 2),
            vec![VehicleState::new(0, 65, 1)],
        );
        let out = apply_action(&w, act(Direction::Stay, SpeedChange::Keep), &cfg);
        assert_eq!(out.event, Event::Goal);
        assert!(out.next.obstacles.is_empty());
    }

    #[test]
    fn speed_is_clamped() {
        let cfg = RoadConfig::default();
        let w = world(VehicleState::new(0, 0, 0), vec![]);
        let out = apply_action(&w, act(Direction::Stay, SpeedChange::Dec), &cfg);
        assert_eq!(out.next.agent.speed, 0);
        assert_eq!(out.event, Event::Alive);
        let w = world(VehicleState::new(1, 0, 3), vec![]);
        let out = apply_action(&w, act(Direction::Stay, SpeedChange::Inc), &cfg);
        assert_eq!(out.next.agent.speed, 3);
    }

    #[test]
    fn reward_table_values() {
        let road = lane_limited_road();
        let rc = RewardConfig::default();
        let r = reward(
            Event::Alive,
            act(Direction::Stay, SpeedChange::Keep),
            1,
            0,
            &rc,
            &road,
        );
        assert!((r - 0.2).abs() < 1e-12);
        let r = reward(
            Event::Crash,
            act(Direction::Right, SpeedChange::Keep),
            2,
            1,
            &rc,
            &road,
        );
        assert!((r - -12.1).abs() < 1e-12);
        let r = reward(
            Event::Alive,
            act(Direction::Stay, SpeedChange::Keep),
            3,
            1,
            &rc,
            &road,
        );
        assert!((r - -5.9).abs() < 1e-12);
    }

    #[test]
    fn reward_components_individually() {
        let road = lane_limited_road();
        let rc = RewardConfig::default();
        let stay = act(Direction::Stay, SpeedChange::Keep);
        let left = act(Direction::Left, SpeedChange::Keep);
        assert_eq!(
            reward_components(Event::Goal, stay, 0, 0, &rc, &road),
            [0.1, 0.0, 0.0]
        );
        assert_eq!(
            reward_components(Event::Bump, left, 1, 0, &rc, &road),
            [-10.0, -0.1, -1.0]
        );
        assert_eq!(
            reward_components(Event::Bump, left, 2, 0, &rc, &road),
            [-10.0, -0.1, -4.0]
        );
        assert_eq!(
            reward_components(Event::Alive, stay, 2, 1, &rc, &road)[2],
            0.2
        );
    }

    #[test]
    fn default_agent_limit_lets_overtaking_lane_run_at_max_speed() {
        let road = RoadConfig::default();
        assert_eq!(road.agent_limit(0), 1);
        assert_eq!(road.agent_limit(1), 3);
        let r = reward(
            Event::Alive,
            act(Direction::Stay, SpeedChange::Keep),
            3,
            1,
            &RewardConfig::default(),
            &road,
        );
        assert!((r - 0.4).abs() < 1e-12);
    }

    fn arb_world() -> impl Strategy<Value = WorldState> {
        (
            0..2i32,
            0..66i32,
            0..=3u32,
            proptest::collection::vec((0..2i32, 0..70i32), 0..12),
        )
            .prop_map(|(lane, pos, speed, cells)| {
                let mut obstacles: Vec<VehicleState> = Vec::new();
                for (l, p) in cells {
                    if (l, p) != (lane, pos) && !obstacles.iter().any(|o| o.cell() == (l, p)) {
                        obstacles.push(VehicleState::new(l, p, [1, 2][l as usize]));
                    }
                }
                WorldState {
                    agent: VehicleState::new(lane, pos, speed),
                    obstacles,
                    step: 0,
                }
            })
    }

    proptest! {
        #[test]
        fn scan_matches_brute_force(w in arb_world(), range in 1..8u32) {
            let cfg = RoadConfig { scan_range: range, ..RoadConfig::default() };
            let got = scan(&w, &cfg).dist;
            prop_assert_eq!(got, brute_scan(&w, &cfg));
            prop_assert!(got.iter().all(|&d| d <= range));
        }

        #[test]
        fn step_invariants(w in arb_world(), a in 0..9usize) {
            let cfg = RoadConfig::default();
            let action = ActionPair::from_index(a).unwrap();
            let out = apply_action(&w, action, &cfg);
            prop_assert_eq!(&out, &apply_action(&w, action, &cfg));
            prop_assert!(out.next.obstacles.len() <= w.obstacles.len());
            for o in &out.next.obstacles {
                prop_assert_eq!(o.speed, cfg.lane_speed_limit[o.lane as usize]);
            }
            prop_assert!(out.next.agent.pos >= w.agent.pos);
            if out.event != Event::Bump {
                prop_assert!(cfg.on_road(out.next.agent.lane));
            }
            let agent_overlaps = out.next.obstacle_at(out.next.agent.lane, out.next.agent.pos).is_some();
            if agent_overlaps {
                prop_assert!(out.event == Event::Crash || out.event == Event::Bump);
            }
            prop_assert_eq!(out.event == Event::Goal, !out.event.is_failure() && out.next.agent.pos >= cfg.length);
        }
    }
}
