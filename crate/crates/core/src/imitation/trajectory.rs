//! Ego trajectory extraction and positive/negative classification.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::fcd::{Snapshot, Timestep};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub time: f64,
    pub ego: Snapshot,
    pub neighbors: Vec<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub ego_id: String,
    /// 0 for the first contiguous presence of `ego_id`, 1 for the next, ...
    pub segment: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// `ego_id` for the first segment, `ego_id#k` for later ones.
    pub fn id(&self) -> String {
        if self.segment == 0 {
            self.ego_id.clone()
        } else {
            format!("{}#{}", self.ego_id, self.segment)
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Smallest ego-neighbour distance over all steps, `None` without neighbours.
    pub fn min_distance(&self) -> Option<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.neighbors.iter().map(move |n| s.ego.distance_to(n)))
            .reduce(f64::min)
    }
}

/// Which vehicles count as egos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoSelector {
    /// Glob over vehicle ids: `*` matches any run, `?` one character.
    IdPattern(String),
    /// Vehicles whose lane at the start of a presence run begins with this prefix.
    EntryLane(String),
}

impl EgoSelector {
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.split_once(':') {
            Some(("id", p)) => Ok(EgoSelector::IdPattern(p.to_string())),
            Some(("lane", p)) => Ok(EgoSelector::EntryLane(p.to_string())),
            _ => Err(Error::Config(format!(
                "ego selector `{spec}` must be `id:<glob>` or `lane:<prefix>`"
            ))),
        }
    }

    fn selects(&self, first: &Snapshot) -> bool {
        match self {
            EgoSelector::IdPattern(p) => glob_match(p, &first.vehicle_id),
            EgoSelector::EntryLane(prefix) => first
                .lane
                .as_deref()
                .is_some_and(|l| l.starts_with(prefix.as_str())),
        }
    }
}

impl fmt::Display for EgoSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EgoSelector::IdPattern(p) => write!(f, "id:{p}"),
            EgoSelector::EntryLane(p) => write!(f, "lane:{p}"),
        }
    }
}

pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    let (mut pi, mut ti) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some((pi, ti));
            pi += 1;
        } else if let Some((sp, st)) = star {
            pi = sp + 1;
            ti = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == '*')
}

/// Inclusive time range; timesteps outside it are dropped before extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: f64,
    pub end: f64,
}

impl Window {
    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

/// One trajectory per selected ego and contiguous run of timesteps in which
/// it appears. Output is ordered by ego id, then segment.
pub fn extract_ego_sequences(
    timesteps: &[Timestep],
    selector: &EgoSelector,
    window: Option<Window>,
) -> Vec<Trajectory> {
    let steps: Vec<&Timestep> = timesteps
        .iter()
        .filter(|ts| window.is_none_or(|w| w.contains(ts.time)))
        .collect();

    let mut open: BTreeMap<&str, (usize, Vec<TrajectoryStep>)> = BTreeMap::new();
    let mut segments: BTreeMap<&str, usize> = BTreeMap::new();
    let mut done: Vec<Trajectory> = Vec::new();
    let mut previous: HashSet<&str> = HashSet::new();

    for ts in &steps {
        let present: HashSet<&str> = ts.snapshots.iter().map(|s| s.vehicle_id.as_str()).collect();
        let closed: Vec<&str> = open
            .keys()
            .copied()
            .filter(|id| !present.contains(id))
            .collect();
        for id in closed {
            let (segment, run) = open.remove(id).unwrap();
            done.push(Trajectory {
                ego_id: id.to_string(),
                segment,
                steps: run,
            });
        }
        for (i, snap) in ts.snapshots.iter().enumerate() {
            let id = snap.vehicle_id.as_str();
            if !open.contains_key(id) {
                // a run is judged once, at its first step
                if previous.contains(id) || !selector.selects(snap) {
                    continue;
                }
                let seg = segments.entry(id).or_insert(0);
                open.insert(id, (*seg, Vec::new()));
                *seg += 1;
            }
            let neighbors = ts
                .snapshots
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, s)| s.clone())
                .collect();
            open.get_mut(id).unwrap().1.push(TrajectoryStep {
                time: ts.time,
                ego: snap.clone(),
                neighbors,
            });
        }
        previous = present;
    }
    for (id, (segment, run)) in open {
        done.push(Trajectory {
            ego_id: id.to_string(),
            segment,
            steps: run,
        });
    }
    done.sort_by(|a, b| (&a.ego_id, a.segment).cmp(&(&b.ego_id, b.segment)));
    done
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeZone {
    pub x_min: f64,
    pub x_max: f64,
    pub lane_prefix: String,
}

impl MergeZone {
    pub fn contains(&self, s: &Snapshot) -> bool {
        self.x_min <= s.x
            && s.x <= self.x_max
            && s.lane.as_deref().map_or(self.lane_prefix.is_empty(), |l| {
                l.starts_with(self.lane_prefix.as_str())
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Closest approach below this counts as a near collision, metres.
    pub d_min: f64,
    pub merge_zone: MergeZone,
    pub t_min: usize,
    pub t_max: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            d_min: 2.0,
            merge_zone: MergeZone {
                x_min: 300.0,
                x_max: 500.0,
                lane_prefix: "main".into(),
            },
            t_min: 10,
            t_max: 500,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0) {
            return Err(Error::Config(format!(
                "d_min must be > 0, got {}",
                self.d_min
            )));
        }
        if self.t_min > self.t_max {
            return Err(Error::Config(format!(
                "t_min {} exceeds t_max {}",
                self.t_min, self.t_max
            )));
        }
        if !(self.merge_zone.x_min <= self.merge_zone.x_max) {
            return Err(Error::Config("merge zone x_min exceeds x_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    NearCollision { min_distance: f64 },
    MergeIncomplete,
    TooShort { steps: usize },
    TooLong { steps: usize },
}

impl Verdict {
    pub fn is_positive(&self) -> bool {
        matches!(self, Verdict::Positive)
    }

    /// Name of the filter clause that rejected the trajectory.
    pub fn clause(&self) -> &'static str {
        match self {
            Verdict::Positive => "none",
            Verdict::NearCollision { .. } => "distance",
            Verdict::MergeIncomplete => "merge",
            Verdict::TooShort { .. } | Verdict::TooLong { .. } => "length",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Positive => write!(f, "positive"),
            Verdict::NearCollision { min_distance } => {
                write!(f, "near-collision (closest approach {min_distance:.2} m)")
            }
            Verdict::MergeIncomplete => write!(f, "merge incomplete"),
            Verdict::TooShort { steps } => write!(f, "too short ({steps} steps)"),
            Verdict::TooLong { steps } => write!(f, "too long ({steps} steps)"),
        }
    }
}

/// Clauses are checked in order: distance, merge completion, length.
pub fn classify_positive(traj: &Trajectory, cfg: &FilterConfig) -> Verdict {
    if let Some(d) = traj.min_distance() {
        if d < cfg.d_min {
            return Verdict::NearCollision { min_distance: d };
        }
    }
    match traj.steps.last() {
        Some(last) if cfg.merge_zone.contains(&last.ego) => {}
        _ => return Verdict::MergeIncomplete,
    }
    let n = traj.len();
    if n < cfg.t_min {
        Verdict::TooShort { steps: n }
    } else if n > cfg.t_max {
        Verdict::TooLong { steps: n }
    } else {
        Verdict::Positive
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(id: &str, x: f64, lane: &str) -> Snapshot {
        Snapshot {
            vehicle_id: id.into(),
            x,
            y: 0.0,
            speed: 10.0,
            angle: 90.0,
            lane: Some(lane.into()),
        }
    }

    fn log(presence: &[&[&str]]) -> Vec<Timestep> {
        presence
            .iter()
            .enumerate()
            .map(|(t, ids)| Timestep {
                time: t as f64,
                snapshots: ids.iter().map(|id| snap(id, t as f64, "main_0")).collect(),
            })
            .collect()
    }

    fn ego() -> EgoSelector {
        EgoSelector::IdPattern("ego".into())
    }

    #[test]
    fn lone_ego_five_steps() {
        let ts = log(&[&["ego"][..]; 5]);
        let trajs = extract_ego_sequences(&ts, &ego(), None);
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].len(), 5);
        assert!(trajs[0].steps.iter().all(|s| s.neighbors.is_empty()));
    }

    #[test]
    fn gap_splits_into_segments() {
        let ts = log(&[&["ego"], &["ego", "b"], &["b"], &["ego"], &["ego"]]);
        let trajs = extract_ego_sequences(&ts, &ego(), None);
        assert_eq!(trajs.len(), 2);
        assert_eq!((trajs[0].len(), trajs[1].len()), (2, 2));
        assert_eq!(trajs[1].id(), "ego#1");
        assert_eq!(trajs[0].steps[1].neighbors[0].vehicle_id, "b");
    }

    #[test]
    fn absent_ego_is_empty() {
        let ts = log(&[&["a"], &["b"]]);
        assert!(extract_ego_sequences(&ts, &ego(), None).is_empty());
    }

    #[test]
    fn window_trims_log() {
        let ts = log(&[&["ego"][..]; 10]);
        let w = Window {
            start: 2.0,
            end: 5.0,
        };
        let trajs = extract_ego_sequences(&ts, &ego(), Some(w));
        assert_eq!(trajs[0].len(), 4);
        assert_eq!(trajs[0].steps[0].time, 2.0);
    }

    #[test]
    fn entry_lane_is_judged_at_first_appearance() {
        let mut ts = log(&[&["a", "b"], &["a", "b"]]);
        ts[0].snapshots[0].lane = Some("ramp_0".into());
        ts[1].snapshots[1].lane = Some("ramp_0".into());
        let trajs = extract_ego_sequences(&ts, &EgoSelector::EntryLane("ramp".into()), None);
        assert_eq!(trajs.len(), 1);
        assert_eq!(trajs[0].ego_id, "a");
        assert_eq!(trajs[0].len(), 2);
    }

    #[test]
    fn globs() {
        assert!(glob_match("ego*", "ego12"));
        assert!(glob_match("*", ""));
        assert!(glob_match("e?o", "ego"));
        assert!(glob_match("*.1*", "flow.12"));
        assert!(!glob_match("ego*", "xego"));
        assert!(!glob_match("e?o", "eo"));
        assert!(glob_match("a*b*c", "aXXbYbc"));
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(
            EgoSelector::parse("id:ego*").unwrap(),
            EgoSelector::IdPattern("ego*".into())
        );
        assert_eq!(
            EgoSelector::parse("lane:ramp").unwrap(),
            EgoSelector::EntryLane("ramp".into())
        );
        assert!(EgoSelector::parse("ramp").is_err());
    }

    fn traj_with(gap: Option<f64>, end_x: f64, len: usize) -> Trajectory {
        let steps = (0..len)
            .map(|i| {
                let x = end_x - (len - 1 - i) as f64;
                TrajectoryStep {
                    time: i as f64,
                    ego: snap("ego", x, "main_0"),
                    neighbors: gap
                        .map(|g| vec![snap("n", x + g, "main_0")])
                        .unwrap_or_default(),
                }
            })
            .collect();
        Trajectory {
            ego_id: "ego".into(),
            segment: 0,
            steps,
        }
    }

    #[test]
    fn near_collision_is_negative() {
        let v = classify_positive(&traj_with(Some(0.5), 350.0, 20), &FilterConfig::default());
        assert_eq!(v, Verdict::NearCollision { min_distance: 0.5 });
    }

    #[test]
    fn no_neighbours_in_zone_is_positive() {
        let v = classify_positive(&traj_with(None, 350.0, 20), &FilterConfig::default());
        assert_eq!(v, Verdict::Positive);
    }

    #[test]
    fn clause_order() {
        let cfg = FilterConfig::default();
        // fails every clause, distance reported first
        assert!(matches!(
            classify_positive(&traj_with(Some(0.1), 10.0, 3), &cfg),
            Verdict::NearCollision { .. }
        ));
        assert_eq!(
            classify_positive(&traj_with(Some(5.0), 10.0, 3), &cfg),
            Verdict::MergeIncomplete
        );
        assert_eq!(
            classify_positive(&traj_with(Some(5.0), 350.0, 3), &cfg),
            Verdict::TooShort { steps: 3 }
        );
        assert_eq!(
            classify_positive(&traj_with(None, 350.0, 501), &cfg),
            Verdict::TooLong { steps: 501 }
        );
    }

    #[test]
    fn wrong_final_lane_is_incomplete() {
        let mut t = traj_with(None, 350.0, 20);
        t.steps.last_mut().unwrap().ego.lane = Some("accel_0".into());
        assert_eq!(
            classify_positive(&t, &FilterConfig::default()),
            Verdict::MergeIncomplete
        );
    }

    #[test]
    fn filter_validation() {
        let mut cfg = FilterConfig::default();
        cfg.d_min = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = FilterConfig::default();
        cfg.t_min = 600;
        assert!(cfg.validate().is_err());
    }

    /// 100 trajectories whose label is fixed by how they are built.
    #[test]
    fn labelled_synthetic_set() {
        let cfg = FilterConfig::default();
        for i in 0..100usize {
            let kind = i % 4;
            let len = 10 + (i * 7) % 50;
            let (t, positive) = match kind {
                0 => (
                    traj_with(Some(2.0 + i as f64 * 0.1), 320.0 + i as f64, len),
                    true,
                ),
                1 => (traj_with(Some(1.99 - i as f64 * 0.01), 320.0, len), false),
                2 => (traj_with(None, 100.0 + i as f64, len), false),
                _ => (traj_with(None, 400.0, 2 + i % 8), false),
            };
            assert_eq!(
                classify_positive(&t, &cfg).is_positive(),
                positive,
                "case {i}"
            );
        }
    }

    /// Brute-force per-id presence scan.
    fn presence_oracle(presence: &[Vec<bool>], id: usize) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut cur = 0;
        for row in presence {
            if row[id] {
                cur += 1;
            } else if cur > 0 {
                runs.push(cur);
                cur = 0;
            }
        }
        if cur > 0 {
            runs.push(cur);
        }
        runs
    }

    proptest! {
        #[test]
        fn step_counts_match_presence_scan(
            presence in prop::collection::vec(prop::collection::vec(any::<bool>(), 4), 0..30)
        ) {
            let names = ["v0", "v1", "v2", "v3"];
            let ts: Vec<Timestep> = presence.iter().enumerate().map(|(t, row)| Timestep {
                time: t as f64,
                snapshots: (0..4).filter(|&i| row[i]).map(|i| snap(names[i], 0.0, "main_0")).collect(),
            }).collect();
            let trajs = extract_ego_sequences(&ts, &EgoSelector::IdPattern("v*".into()), None);
            for (i, name) in names.iter().enumerate() {
                let got: Vec<usize> = trajs.iter().filter(|t| t.ego_id == *name).map(|t| t.len()).collect();
                prop_assert_eq!(got, presence_oracle(&presence, i));
            }
            for t in &trajs {
                for s in &t.steps {
                    let row = s.time as usize;
                    prop_assert_eq!(s.neighbors.len(), presence[row].iter().filter(|&&p| p).count() - 1);
                }
            }
        }

        #[test]
        fn raising_d_min_never_creates_positives(
            gap in 0.0f64..10.0, d1 in 0.1f64..10.0, extra in 0.0f64..5.0, len in 1usize..40
        ) {
            let t = traj_with(Some(gap), 350.0, len);
            let lo = FilterConfig { d_min: d1, ..FilterConfig::default() };
            let hi = FilterConfig { d_min: d1 + extra, ..FilterConfig::default() };
            if !classify_positive(&t, &lo).is_positive() {
                prop_assert!(!classify_positive(&t, &hi).is_positive());
            }
        }
    }
}
