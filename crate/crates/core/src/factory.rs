//! Production side of the co-simulation: floor layout, machines with cyclic
//! operating modes, AGVs on waypoint routes and the production status
//! observable derived from them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{hash_label, rng_stream, streams};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(self, other: Point, f: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * f,
            self.y + (other.y - self.y) * f,
        )
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point::new(x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Self {
        Rect { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, p: Point) -> bool {
        const EPS: f64 = 1e-9;
        p.x >= self.min.x - EPS
            && p.x <= self.max.x + EPS
            && p.y >= self.min.y - EPS
            && p.y <= self.max.y + EPS
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Wall {
    pub a: Point,
    pub b: Point,
    /// dB added to the path loss for every crossing.
    pub penetration_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Zone {
    pub name: String,
    pub area: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactoryLayout {
    pub bounds: Rect,
    #[serde(default)]
    pub walls: Vec<Wall>,
    #[serde(default)]
    pub zones: Vec<Zone>,
}

impl FactoryLayout {
    pub fn open(bounds: Rect) -> Self {
        FactoryLayout {
            bounds,
            walls: Vec::new(),
            zones: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineMode {
    pub name: String,
    /// Seconds.
    pub duration: f64,
    #[serde(default)]
    pub traffic_profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Machine {
    pub id: String,
    pub position: Point,
    pub modes: Vec<MachineMode>,
    /// Cyclic sequence of indices into `modes`.
    pub schedule: Vec<usize>,
}

impl Machine {
    pub fn cycle_length(&self) -> f64 {
        self.schedule.iter().map(|&m| self.modes[m].duration).sum()
    }

    /// Mode index active at `local_time` seconds into the machine's own cycle.
    pub fn mode_at(&self, local_time: f64) -> usize {
        let cycle = self.cycle_length();
        let mut t = (local_time + BOUNDARY_EPS).rem_euclid(cycle);
        for &m in &self.schedule {
            let d = self.modes[m].duration;
            if t < d {
                return m;
            }
            t -= d;
        }
        *self.schedule.last().expect("non-empty schedule")
    }

    pub fn mode_index(&self, name: &str) -> Option<usize> {
        self.modes.iter().position(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agv {
    pub id: String,
    pub waypoints: Vec<Point>,
    /// m/s.
    pub speed: f64,
    #[serde(rename = "loop", default)]
    pub looped: bool,
    #[serde(default)]
    pub task_profile: Option<String>,
    /// `[start, stop)` within the production cycle; always active if absent.
    #[serde(default)]
    pub active_window: Option<[f64; 2]>,
}

impl Agv {
    fn path(&self) -> Vec<Point> {
        let mut pts = self.waypoints.clone();
        if self.looped && pts.len() > 1 {
            pts.push(pts[0]);
        }
        pts
    }

    pub fn path_length(&self) -> f64 {
        self.path().windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Time for one pass over the route (one lap if looped).
    pub fn period(&self) -> f64 {
        self.path_length() / self.speed
    }

    pub fn is_active(&self, cycle_time: f64) -> bool {
        match self.active_window {
            None => true,
            Some([start, stop]) => cycle_time >= start && cycle_time < stop,
        }
    }
}

/// Position at time `t`: constant speed along the polyline, wrapping when
/// looped and parking at the last waypoint otherwise.
pub fn agv_position(agv: &Agv, t: f64) -> Point {
    let path = agv.path();
    if path.len() < 2 {
        return path.first().copied().unwrap_or_default();
    }
    let total = agv.path_length();
    let travelled = agv.speed * t.max(0.0);
    let mut s = if agv.looped {
        travelled.rem_euclid(total)
    } else {
        travelled.min(total)
    };
    for w in path.windows(2) {
        let len = w[0].distance(w[1]);
        if s <= len {
            return w[0].lerp(w[1], if len > 0.0 { s / len } else { 0.0 });
        }
        s -= len;
    }
    *path.last().expect("non-empty path")
}

/// Times this close below a phase or mode boundary count as on it, so slot
/// clocks built from sums of decimal steps switch exactly at the boundary.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductionCycle {
    /// Global cycle length C in seconds.
    pub length: f64,
    /// Number of phases P.
    #[serde(default = "default_phases")]
    pub phases: u32,
}

fn default_phases() -> u32 {
    20
}

impl ProductionCycle {
    pub fn phase_at(&self, t: f64) -> u32 {
        let ct = (t + BOUNDARY_EPS).rem_euclid(self.length);
        let p = (f64::from(self.phases) * ct / self.length).floor() as u32;
        p.min(self.phases - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factory {
    pub layout: FactoryLayout,
    pub cycle: ProductionCycle,
    #[serde(default)]
    pub machines: Vec<Machine>,
    #[serde(default)]
    pub agvs: Vec<Agv>,
    /// Half-width (s) of a uniform per-cycle shift of each machine schedule.
    /// Zero keeps production strictly periodic.
    #[serde(default)]
    pub mode_jitter: f64,
    #[serde(default)]
    pub jitter_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProductionStatus {
    pub cycle_phase: u32,
    pub machine_modes: BTreeMap<String, usize>,
    pub active_agvs: BTreeSet<String>,
}

impl Factory {
    pub fn machine(&self, id: &str) -> Option<&Machine> {
        self.machines.iter().find(|m| m.id == id)
    }

    pub fn agv(&self, id: &str) -> Option<&Agv> {
        self.agvs.iter().find(|a| a.id == id)
    }

    fn machine_local_time(&self, idx: usize, t: f64) -> f64 {
        let ct = t.rem_euclid(self.cycle.length);
        if self.mode_jitter <= 0.0 {
            return ct;
        }
        let cycle_index = (t / self.cycle.length).floor().max(0.0) as u64;
        let stream = rng_stream(self.jitter_seed, streams::MODE_JITTER);
        let (u, _) =
            stream.keyed_uniform_pair(hash_label(&self.machines[idx].id), cycle_index);
        ct + (2.0 * u - 1.0) * self.mode_jitter
    }

    pub fn machine_mode(&self, machine_id: &str, t: f64) -> Option<usize> {
        let idx = self.machines.iter().position(|m| m.id == machine_id)?;
        Some(self.machines[idx].mode_at(self.machine_local_time(idx, t)))
    }

    pub fn production_status(&self, t: f64) -> ProductionStatus {
        let ct = t.rem_euclid(self.cycle.length);
        let machine_modes = self
            .machines
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), m.mode_at(self.machine_local_time(i, t))))
            .collect();
        let active_agvs = self
            .agvs
            .iter()
            .filter(|a| a.is_active(ct))
            .map(|a| a.id.clone())
            .collect();
        ProductionStatus {
            cycle_phase: self.cycle.phase_at(t),
            machine_modes,
            active_agvs,
        }
    }

    pub fn status_encoding(&self) -> StatusEncoding {
        StatusEncoding {
            phases: self.cycle.phases,
            machine_ids: self.machines.iter().map(|m| m.id.clone()).collect(),
        }
    }
}

/// Layout of the status feature vector: `phases` one-hot slots, one slot per
/// listed machine, then the active-AGV count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEncoding {
    pub phases: u32,
    pub machine_ids: Vec<String>,
}

impl StatusEncoding {
    pub fn len(&self) -> usize {
        self.phases as usize + self.machine_ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn status_feature_vector(status: &ProductionStatus, enc: &StatusEncoding) -> Result<Vec<f64>> {
    if let Some(unknown) = status
        .machine_modes
        .keys()
        .find(|id| !enc.machine_ids.contains(id))
    {
        return Err(Error::UnknownMachine(unknown.clone()));
    }
    if status.cycle_phase >= enc.phases {
        return Err(Error::InvalidArgument(format!(
            "phase {} outside 0..{}",
            status.cycle_phase, enc.phases
        )));
    }
    let mut v = vec![0.0; enc.len()];
    v[status.cycle_phase as usize] = 1.0;
    for (i, id) in enc.machine_ids.iter().enumerate() {
        let mode = status
            .machine_modes
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("status lacks machine `{id}`")))?;
        v[enc.phases as usize + i] = *mode as f64;
    }
    v[enc.len() - 1] = status.active_agvs.len() as f64;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_agv() -> Agv {
        Agv {
            id: "agv1".into(),
            waypoints: vec![Point::new(0.0, 0.0), Point::new(10.0, 0.0)],
            speed: 1.0,
            looped: false,
            task_profile: None,
            active_window: None,
        }
    }

    fn square_agv() -> Agv {
        Agv {
            id: "sq".into(),
            waypoints: vec![
                Point::new(0.0, 0.0),
                Point::new(4.0, 0.0),
                Point::new(4.0, 3.0),
                Point::new(0.0, 3.0),
            ],
            speed: 2.0,
            looped: true,
            task_profile: None,
            active_window: None,
        }
    }

    fn press() -> Machine {
        Machine {
            id: "press".into(),
            position: Point::new(1.0, 1.0),
            modes: vec![
                MachineMode {
                    name: "idle".into(),
                    duration: 60.0,
                    traffic_profile: None,
                },
                MachineMode {
                    name: "active".into(),
                    duration: 40.0,
                    traffic_profile: None,
                },
            ],
            schedule: vec![0, 1],
        }
    }

    fn factory() -> Factory {
        Factory {
            layout: FactoryLayout::open(Rect::new(Point::new(0.0, 0.0), Point::new(20.0, 10.0))),
            cycle: ProductionCycle {
                length: 100.0,
                phases: 10,
            },
            machines: vec![press()],
            agvs: vec![square_agv()],
            mode_jitter: 0.0,
            jitter_seed: 0,
        }
    }

    #[test]
    fn linear_motion() {
        assert_eq!(agv_position(&line_agv(), 5.0), Point::new(5.0, 0.0));
        assert_eq!(agv_position(&line_agv(), 0.0), Point::new(0.0, 0.0));
        assert_eq!(agv_position(&line_agv(), 50.0), Point::new(10.0, 0.0));
    }

    #[test]
    fn looped_route_returns_to_start() {
        let agv = square_agv();
        assert_eq!(agv.path_length(), 14.0);
        let p = agv_position(&agv, agv.period());
        assert!(p.distance(Point::new(0.0, 0.0)) < 1e-12);
    }

    #[test]
    fn phase_is_floor_of_cycle_fraction() {
        let f = factory();
        assert_eq!(f.production_status(25.0).cycle_phase, 2);
        assert_eq!(f.production_status(99.999).cycle_phase, 9);
    }

    #[test]
    fn machine_mode_follows_schedule() {
        let f = factory();
        let s = f.production_status(70.0);
        let m = &f.machines[0];
        assert_eq!(m.modes[s.machine_modes["press"]].name, "active");
        assert_eq!(f.production_status(10.0).machine_modes["press"], 0);
    }

    #[test]
    fn status_is_cycle_periodic() {
        let f = factory();
        for t in [0.0, 12.5, 59.9, 60.0, 99.0] {
            assert_eq!(f.production_status(t), f.production_status(t + 100.0));
        }
    }

    #[test]
    fn active_window_filters_agvs() {
        let mut f = factory();
        f.agvs[0].active_window = Some([10.0, 20.0]);
        assert!(f.production_status(5.0).active_agvs.is_empty());
        assert!(f.production_status(15.0).active_agvs.contains("sq"));
        assert!(f.production_status(115.0).active_agvs.contains("sq"));
    }

    #[test]
    fn one_hot_encoding() {
        let status = ProductionStatus {
            cycle_phase: 1,
            machine_modes: BTreeMap::new(),
            active_agvs: BTreeSet::new(),
        };
        let enc = StatusEncoding {
            phases: 4,
            machine_ids: vec![],
        };
        assert_eq!(
            status_feature_vector(&status, &enc).unwrap(),
            vec![0.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn agv_count_is_last_component() {
        let status = ProductionStatus {
            cycle_phase: 0,
            machine_modes: BTreeMap::new(),
            active_agvs: ["a", "b", "c"].iter().map(|s| s.to_string()).collect(),
        };
        let enc = StatusEncoding {
            phases: 2,
            machine_ids: vec![],
        };
        let v = status_feature_vector(&status, &enc).unwrap();
        assert_eq!(*v.last().unwrap(), 3.0);
        assert_eq!(v, status_feature_vector(&status.clone(), &enc).unwrap());
    }

    #[test]
    fn unknown_machine_is_rejected() {
        let f = factory();
        let status = f.production_status(70.0);
        let enc = StatusEncoding {
            phases: 10,
            machine_ids: vec!["other".into()],
        };
        assert!(matches!(
            status_feature_vector(&status, &enc),
            Err(Error::UnknownMachine(id)) if id == "press"
        ));
        let v = status_feature_vector(&status, &f.status_encoding()).unwrap();
        assert_eq!(v.len(), 12);
        assert_eq!(v[10], 1.0);
    }

    #[test]
    fn mode_jitter_shifts_schedule_per_cycle() {
        let mut f = factory();
        f.mode_jitter = 5.0;
        f.jitter_seed = 3;
        let modes: Vec<usize> = (0..40)
            .map(|c| f.production_status(58.0 + 100.0 * c as f64).machine_modes["press"])
            .collect();
        assert!(modes.contains(&0) && modes.contains(&1));
        // Deterministic for a fixed seed.
        assert_eq!(f.production_status(358.0), f.production_status(358.0));
    }
}
