//! Procedural scenario generation and dataset persistence.
//!
//! Maps are small lane-centerline networks (straight, curve, intersection,
//! merge). Rule-based vehicles follow their lane with pure-pursuit steering
//! and a gap-proportional speed controller; pedestrians are constant
//! velocity crossing walkers. Controls are held constant over each action
//! chunk so every generated future is exactly reproducible by
//! inverse dynamics plus rollout. Generated scenarios are collision-free
//! by construction: any residual overlap triggers a resample.

use crate::error::{MdgError, Result};
use crate::geom::Obb;
use crate::kinematics::{AgentState, Pose, StateTensor, CHUNK, DT};
use crate::rng::{Stream, StreamKey};
use crate::tensor::wrap_angle;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::Path;

pub const DATA_MAGIC: &[u8; 8] = b"MDGDATA1";
pub const DATA_VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 1;

pub const LANE_SPACING: f64 = 4.0;
pub const WAYPOINTS_PER_LANE: usize = 16;
pub const SPEED_CAP: f64 = 12.0;
pub const COMFORT_ACCEL: f64 = 3.0;
pub const MAX_YAW_RATE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Straight,
    Curve,
    Intersection,
    Merge,
}

impl MapKind {
    pub fn all() -> [MapKind; 4] {
        [
            MapKind::Straight,
            MapKind::Curve,
            MapKind::Intersection,
            MapKind::Merge,
        ]
    }

    pub fn tag(&self) -> &'static str {
        match self {
            MapKind::Straight => "straight",
            MapKind::Curve => "curve",
            MapKind::Intersection => "intersection",
            MapKind::Merge => "merge",
        }
    }

    pub fn from_tag(s: &str) -> Option<MapKind> {
        match s {
            "straight" => Some(MapKind::Straight),
            "curve" => Some(MapKind::Curve),
            "intersection" => Some(MapKind::Intersection),
            "merge" => Some(MapKind::Merge),
            _ => None,
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            MapKind::Straight => 0,
            MapKind::Curve => 1,
            MapKind::Intersection => 2,
            MapKind::Merge => 3,
        }
    }

    fn from_u8(v: u8) -> Result<MapKind> {
        Ok(match v {
            0 => MapKind::Straight,
            1 => MapKind::Curve,
            2 => MapKind::Intersection,
            3 => MapKind::Merge,
            _ => return Err(MdgError::data(format!("unknown map kind {v}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightPhase {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl LightPhase {
    pub fn index(&self) -> usize {
        match self {
            LightPhase::Red => 0,
            LightPhase::Yellow => 1,
            LightPhase::Green => 2,
            LightPhase::Unknown => 3,
        }
    }

    fn from_u8(v: u8) -> Result<LightPhase> {
        Ok(match v {
            0 => LightPhase::Red,
            1 => LightPhase::Yellow,
            2 => LightPhase::Green,
            3 => LightPhase::Unknown,
            _ => return Err(MdgError::data(format!("unknown light phase {v}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
}

/// A lane centerline: waypoints with headings.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    /// (x, y, heading) per waypoint.
    pub points: Vec<(f64, f64, f64)>,
}

impl Polyline {
    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.0, p.1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficLight {
    pub phase: LightPhase,
    /// Stop point pose on the controlled lane.
    pub pose: Pose,
    /// Index of the controlled lane and arclength of the stop line.
    pub lane: usize,
    pub stop_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadMap {
    pub kind: MapKind,
    pub lanes: Vec<Polyline>,
    pub lights: Vec<TrafficLight>,
}

/// One recorded physical state (velocity stored as signed speed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub kind: AgentKind,
    /// State at t = 0.
    pub init: AgentState,
    /// H steps ending at t = 0 (last entry equals init).
    pub history: Vec<TrajPoint>,
    /// T ground-truth future steps.
    pub future: Vec<TrajPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: u64,
    pub map: RoadMap,
    pub agents: Vec<Agent>,
    pub ego: usize,
    /// Ego route polylines (the lane sequence its controller follows).
    pub routes: Vec<Polyline>,
    pub dt: f64,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn horizon(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    pub fn init_states(&self) -> Vec<AgentState> {
        self.agents.iter().map(|a| a.init).collect()
    }

    /// Ground-truth futures as a (N, T, 5) state tensor.
    pub fn gt_states(&self) -> StateTensor {
        let n = self.n_agents();
        let t = self.horizon();
        let mut st = StateTensor::zeros(n, t);
        for (a, agent) in self.agents.iter().enumerate() {
            for (i, p) in agent.future.iter().enumerate() {
                let (s, c) = p.theta.sin_cos();
                st.set(a, i, 0, p.x);
                st.set(a, i, 1, p.y);
                st.set(a, i, 2, p.theta);
                st.set(a, i, 3, p.v * c);
                st.set(a, i, 4, p.v * s);
            }
        }
        st
    }
}

// ── arclength-parameterized paths ────────────────────────────────────

pub struct ArcPath {
    pts: Vec<(f64, f64, f64)>,
    cum: Vec<f64>,
}

impl ArcPath {
    pub fn new(poly: &Polyline) -> Self {
        let pts = poly.points.clone();
        let mut cum = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            cum.push(cum.last().unwrap() + d);
        }
        ArcPath { pts, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Pose at arclength s; extrapolates straight beyond the ends.
    pub fn sample(&self, s: f64) -> Pose {
        let n = self.pts.len();
        if s <= 0.0 {
            let p = self.pts[0];
            let (sn, cs) = p.2.sin_cos();
            return Pose::new(p.0 + s * cs, p.1 + s * sn, p.2);
        }
        if s >= self.length() {
            let p = self.pts[n - 1];
            let d = s - self.length();
            let (sn, cs) = p.2.sin_cos();
            return Pose::new(p.0 + d * cs, p.1 + d * sn, p.2);
        }
        let mut i = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        if i >= n - 1 {
            i = n - 2;
        }
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let a = self.pts[i];
        let b = self.pts[i + 1];
        Pose::new(
            a.0 + t * (b.0 - a.0),
            a.1 + t * (b.1 - a.1),
            a.2 + t * wrap_angle(b.2 - a.2),
        )
    }
}

// ── map generation ───────────────────────────────────────────────────

fn straight_lane(x0: f64, y: f64, len: f64, n: usize) -> Polyline {
    let points = (0..n)
        .map(|i| (x0 + len * i as f64 / (n - 1) as f64, y, 0.0))
        .collect();
    Polyline { points }
}

fn axis_lane(start: (f64, f64), heading: f64, len: f64, n: usize) -> Polyline {
    let (s, c) = heading.sin_cos();
    let points = (0..n)
        .map(|i| {
            let d = len * i as f64 / (n - 1) as f64;
            (start.0 + d * c, start.1 + d * s, heading)
        })
        .collect();
    Polyline { points }
}

fn arc_lane(radius: f64, theta0: f64, span: f64, n: usize) -> Polyline {
    // Counter-clockwise arc around the origin; heading is the tangent.
    let points = (0..n)
        .map(|i| {
            let th = theta0 + span * i as f64 / (n - 1) as f64;
            (
                radius * th.cos(),
                radius * th.sin(),
                wrap_angle(th + std::f64::consts::FRAC_PI_2),
            )
        })
        .collect();
    Polyline { points }
}

/// Generate lane centerlines and (for intersections) traffic lights.
pub fn generate_map(kind: MapKind, rng: &mut Stream) -> RoadMap {
    let n = WAYPOINTS_PER_LANE;
    match kind {
        MapKind::Straight => {
            let lanes = (0..2 + rng.next_index(2))
                .map(|i| straight_lane(-40.0, i as f64 * LANE_SPACING, 150.0, n))
                .collect();
            RoadMap {
                kind,
                lanes,
                lights: vec![],
            }
        }
        MapKind::Curve => {
            let r0 = 50.0;
            let span = 1.6;
            let theta0 = -0.8;
            let lanes = vec![
                arc_lane(r0, theta0, span, n),
                arc_lane(r0 + LANE_SPACING, theta0, span, n),
            ];
            RoadMap {
                kind,
                lanes,
                lights: vec![],
            }
        }
        MapKind::Intersection => {
            use std::f64::consts::{FRAC_PI_2, PI};
            let half = 80.0;
            // Right-hand traffic: each approach offset 2 m to its right.
            let lanes = vec![
                axis_lane((-half, -2.0), 0.0, 2.0 * half, n), // eastbound
                axis_lane((half, 2.0), PI, 2.0 * half, n),    // westbound
                axis_lane((2.0, -half), FRAC_PI_2, 2.0 * half, n), // northbound
                axis_lane((-2.0, half), -FRAC_PI_2, 2.0 * half, n), // southbound
            ];
            // One full phase set: east-west vs north-south.
            let ew_green = rng.next_bool();
            let phase_of = |is_ew: bool| {
                if is_ew == ew_green {
                    LightPhase::Green
                } else {
                    LightPhase::Red
                }
            };
            let stop_s = half - 8.0;
            let lights = (0..4)
                .map(|lane| {
                    let path = ArcPath::new(&lanes[lane]);
                    let pose = path.sample(stop_s);
                    TrafficLight {
                        phase: phase_of(lane < 2),
                        pose,
                        lane,
                        stop_s,
                    }
                })
                .collect();
            RoadMap {
                kind,
                lanes,
                lights,
            }
        }
        MapKind::Merge => {
            let main = straight_lane(-60.0, 0.0, 180.0, n);
            // Ramp converging onto the main lane at x = 40.
            let join_x = 40.0;
            let start = (-60.0, -18.0);
            let mut points = Vec::with_capacity(n);
            for i in 0..n {
                let t = i as f64 / (n - 1) as f64;
                let x = start.0 + (join_x - start.0) * t;
                // Smoothstep lateral blend keeps headings tangent.
                let blend = t * t * (3.0 - 2.0 * t);
                let y = start.1 * (1.0 - blend);
                points.push((x, y, 0.0));
            }
            // Fix headings from geometry.
            for i in 0..n {
                let (px, py) = (points[i].0, points[i].1);
                let (qx, qy) = if i + 1 < n {
                    (points[i + 1].0, points[i + 1].1)
                } else {
                    (px + 1.0, py)
                };
                points[i].2 = (qy - py).atan2(qx - px);
            }
            let ramp = Polyline { points };
            RoadMap {
                kind,
                lanes: vec![main, ramp],
                lights: vec![],
            }
        }
    }
}

// ── rule-based agent simulation ──────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct VehicleSpawn {
    pub lane: usize,
    pub s: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
    /// Latent driving style: cruise speed, time headway, and standstill
    /// gap. Not observable from a short history, so futures carry genuine
    /// uncertainty given the scene context.
    pub v_target: f64,
    pub headway: f64,
    pub min_gap: f64,
}

struct VehicleSim {
    spawn: VehicleSpawn,
    s: f64,
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
    a_cmd: f64,
    w_cmd: f64,
}

fn stop_accel(v: f64, dist: f64) -> f64 {
    // Distance is measured to the stop target; hold a 2 m margin.
    let margin = 2.0;
    if dist <= margin {
        (-4.0 * v).max(-COMFORT_ACCEL)
    } else {
        let req = -v * v / (2.0 * (dist - margin));
        if req < -0.6 {
            req.max(-COMFORT_ACCEL)
        } else {
            f64::INFINITY
        }
    }
}

/// Simulate vehicles for `steps` base steps; returns per-vehicle state
/// trajectories (including the spawn state at index 0).
pub fn simulate_vehicles(
    map: &RoadMap,
    spawns: &[VehicleSpawn],
    steps: usize,
    control_phase: usize,
) -> Vec<Vec<TrajPoint>> {
    let paths: Vec<ArcPath> = map.lanes.iter().map(ArcPath::new).collect();
    let mut sims: Vec<VehicleSim> = spawns
        .iter()
        .map(|sp| {
            let pose = paths[sp.lane].sample(sp.s);
            VehicleSim {
                spawn: *sp,
                s: sp.s,
                x: pose.x,
                y: pose.y,
                theta: pose.theta,
                v: sp.v,
                a_cmd: 0.0,
                w_cmd: 0.0,
            }
        })
        .collect();
    let mut out: Vec<Vec<TrajPoint>> = sims
        .iter()
        .map(|s| {
            vec![TrajPoint {
                x: s.x,
                y: s.y,
                theta: s.theta,
                v: s.v,
            }]
        })
        .collect();

    for step in 0..steps {
        // Controls update on chunk boundaries so actions are piecewise
        // constant and inverse dynamics recovers them exactly.
        if step % CHUNK == control_phase % CHUNK {
            let snapshot: Vec<(usize, f64, f64)> =
                sims.iter().map(|s| (s.spawn.lane, s.s, s.v)).collect();
            for (i, sim) in sims.iter_mut().enumerate() {
                let path = &paths[sim.spawn.lane];
                // Cruise toward this driver's latent target speed.
                let v_target = sim.spawn.v_target.min(SPEED_CAP);
                let mut a = 0.5 * (v_target - sim.v);
                // Gap-proportional following of the nearest leader.
                let mut best_gap = f64::INFINITY;
                let mut lead_v = 0.0;
                for (j, &(lane, s_j, v_j)) in snapshot.iter().enumerate() {
                    if j == i || lane != sim.spawn.lane {
                        continue;
                    }
                    let gap = s_j - sim.s
                        - 0.5 * (sim.spawn.length + spawns[j].length);
                    if gap > 0.0 && gap < best_gap {
                        best_gap = gap;
                        lead_v = v_j;
                    }
                }
                if best_gap < 40.0 {
                    let desired = sim.spawn.min_gap + sim.spawn.headway * sim.v;
                    let follow = 0.8 * (best_gap - desired) + 0.6 * (lead_v - sim.v);
                    a = a.min(follow);
                }
                // Red or yellow light ahead on this lane.
                for light in &map.lights {
                    if light.lane == sim.spawn.lane
                        && light.phase != LightPhase::Green
                        && light.stop_s > sim.s
                    {
                        a = a.min(stop_accel(sim.v, light.stop_s - sim.s));
                    }
                }
                // No reversing: bound braking so v stays non-negative
                // after the chunk.
                let dt_chunk = DT * CHUNK as f64;
                a = a.clamp(-COMFORT_ACCEL, COMFORT_ACCEL).max(-sim.v / dt_chunk);
                sim.a_cmd = a;

                // Pure-pursuit steering toward a lookahead point.
                let lookahead = (1.5 + 0.8 * sim.v).clamp(2.0, 8.0);
                let target = path.sample(sim.s + lookahead);
                let pose = Pose::new(sim.x, sim.y, sim.theta);
                let (lx, ly) = pose.world_to_local(target.x, target.y);
                let alpha = ly.atan2(lx.max(0.1));
                let w = (2.0 * sim.v * alpha.sin() / lookahead)
                    .clamp(-MAX_YAW_RATE, MAX_YAW_RATE);
                sim.w_cmd = w;
            }
        }
        for (i, sim) in sims.iter_mut().enumerate() {
            sim.v += sim.a_cmd * DT;
            sim.theta = wrap_angle(sim.theta + sim.w_cmd * DT);
            sim.x += sim.v * sim.theta.cos() * DT;
            sim.y += sim.v * sim.theta.sin() * DT;
            sim.s += sim.v * DT;
            out[i].push(TrajPoint {
                x: sim.x,
                y: sim.y,
                theta: sim.theta,
                v: sim.v,
            });
        }
    }
    out
}

fn obb_of(p: &TrajPoint, length: f64, width: f64) -> Obb {
    Obb::new(p.x, p.y, p.theta, length, width)
}

/// Brute-force overlap check over all pairs and steps.
fn any_collision(trajs: &[Vec<TrajPoint>], extents: &[(f64, f64)]) -> bool {
    let n = trajs.len();
    let steps = trajs.first().map_or(0, |t| t.len());
    for t in 0..steps {
        for i in 0..n {
            let a = obb_of(&trajs[i][t], extents[i].0, extents[i].1);
            for j in i + 1..n {
                let b = obb_of(&trajs[j][t], extents[j].0, extents[j].1);
                if a.overlaps(&b) {
                    return true;
                }
            }
        }
    }
    false
}

/// Generation parameters at desk scale.
#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub history: usize,
    pub horizon: usize,
    pub n_agents: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            history: 10,
            horizon: 40,
            n_agents: 8,
        }
    }
}

/// Populate a map with rule-based agents and simulate ground truth.
pub fn simulate_rule_agents(
    map: &RoadMap,
    cfg: &GenConfig,
    id: u64,
    rng: &mut Stream,
) -> Result<Scenario> {
    let paths: Vec<ArcPath> = map.lanes.iter().map(ArcPath::new).collect();
    let total_steps = cfg.history + cfg.horizon;
    let mut n_agents = cfg.n_agents.max(1);
    // Rough lane capacity at the 14 m spawn gap.
    let capacity: usize = paths
        .iter()
        .map(|p| ((p.length() - 44.0) / 14.0).max(1.0) as usize)
        .sum();
    n_agents = n_agents.min(capacity.max(1));

    for attempt in 0..20u64 {
        let mut arng = rng_for_attempt(rng, attempt);
        let want_ped = n_agents >= 4 && arng.next_uniform() < 0.35;
        let n_vehicles = n_agents - usize::from(want_ped);

        // Spawn vehicles with same-lane arc gaps.
        let mut spawns: Vec<VehicleSpawn> = Vec::new();
        let mut ok = true;
        for _ in 0..n_vehicles {
            let mut placed = false;
            for _ in 0..20 {
                let lane = arng.next_index(map.lanes.len());
                let s = arng.next_range(4.0, (paths[lane].length() - 40.0).max(5.0));
                let clear = spawns
                    .iter()
                    .filter(|sp| sp.lane == lane)
                    .all(|sp| (sp.s - s).abs() >= 14.0);
                if clear {
                    spawns.push(VehicleSpawn {
                        lane,
                        s,
                        v: arng.next_range(3.0, 9.0),
                        length: arng.next_range(4.2, 5.0),
                        width: arng.next_range(1.8, 2.1),
                        v_target: arng.next_range(6.0, 12.0),
                        headway: arng.next_range(0.8, 1.6),
                        min_gap: arng.next_range(2.0, 3.0),
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            n_agents = n_agents.saturating_sub(1).max(1);
            continue;
        }

        let control_phase = cfg.history % CHUNK;
        let trajs = simulate_vehicles(map, &spawns, total_steps, control_phase);

        // Constant-velocity pedestrian crossing away from traffic.
        let mut ped: Option<(Vec<TrajPoint>, f64, f64)> = None;
        if want_ped {
            for _ in 0..10 {
                let walk_v = arng.next_range(0.8, 1.5);
                let x0 = arng.next_range(-30.0, 60.0);
                let y0 = arng.next_range(8.0, 14.0);
                let heading = -std::f64::consts::FRAC_PI_2;
                let mut tp = Vec::with_capacity(total_steps + 1);
                let (sn, cs) = heading.sin_cos();
                for t in 0..=total_steps {
                    tp.push(TrajPoint {
                        x: x0 + walk_v * cs * DT * t as f64,
                        y: y0 + walk_v * sn * DT * t as f64,
                        theta: heading,
                        v: walk_v,
                    });
                }
                let clear = trajs.iter().enumerate().all(|(i, tr)| {
                    tr.iter().zip(&tp).all(|(a, b)| {
                        let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
                        d2 > (3.0 + 0.5 * spawns[i].length).powi(2)
                    })
                });
                if clear {
                    ped = Some((tp, 0.7, 0.7));
                    break;
                }
            }
            if ped.is_none() {
                // No safe crossing found; fall back to vehicles only.
            }
        }

        let mut all_trajs = trajs.clone();
        let mut extents: Vec<(f64, f64)> =
            spawns.iter().map(|sp| (sp.length, sp.width)).collect();
        if let Some((tp, l, w)) = &ped {
            all_trajs.push(tp.clone());
            extents.push((*l, *w));
        }
        if any_collision(&all_trajs, &extents) {
            continue;
        }

        // Assemble the scenario: history covers indices 0..=H with the
        // init state at index H.
        let mut agents = Vec::new();
        for (i, tr) in all_trajs.iter().enumerate() {
            let is_ped = i >= spawns.len();
            let (length, width) = extents[i];
            let cur = tr[cfg.history];
            let init = AgentState {
                x: cur.x,
                y: cur.y,
                theta: cur.theta,
                v: cur.v,
                length,
                width,
            };
            let history = tr[1..=cfg.history].to_vec();
            let future = tr[cfg.history + 1..].to_vec();
            agents.push(Agent {
                kind: if is_ped {
                    AgentKind::Pedestrian
                } else {
                    AgentKind::Vehicle
                },
                init,
                history,
                future,
            });
        }
        let ego = 0;
        for a in &agents {
            let d = ((a.init.x - agents[ego].init.x).powi(2)
                + (a.init.y - agents[ego].init.y).powi(2))
            .sqrt();
            assert!(d < 200.0, "agent spawned {d:.1} m from ego");
        }
        let routes = vec![map.lanes[spawns[ego].lane].clone()];
        return Ok(Scenario {
            id,
            map: map.clone(),
            agents,
            ego,
            routes,
            dt: DT,
        });
    }
    Err(MdgError::data(format!(
        "failed to build a collision-free scenario after 20 attempts (id {id})"
    )))
}

fn rng_for_attempt(base: &mut Stream, attempt: u64) -> Stream {
    // Each attempt gets an independent deterministic stream.
    StreamKey::root(base.next_u64()).child(attempt).stream()
}

/// Generate one scenario from a master seed and index.
pub fn generate_scenario(
    kind: MapKind,
    cfg: &GenConfig,
    seed: u64,
    index: u64,
) -> Result<Scenario> {
    let mut rng = StreamKey::root(seed).child(index).stream();
    let map = generate_map(kind, &mut rng);
    simulate_rule_agents(&map, cfg, index, &mut rng)
}

/// Generate a dataset cycling through the requested kinds.
pub fn generate_dataset(
    kinds: &[MapKind],
    count: usize,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Vec<Scenario>> {
    assert!(!kinds.is_empty(), "at least one map kind required");
    (0..count)
        .map(|i| generate_scenario(kinds[i % kinds.len()], cfg, seed, i as u64))
        .collect()
}

// ── dataset persistence ──────────────────────────────────────────────

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MdgError::data("dataset record truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn write_polyline(w: &mut ByteWriter, p: &Polyline) {
    w.u32(p.points.len() as u32);
    for &(x, y, th) in &p.points {
        w.f64(x);
        w.f64(y);
        w.f64(th);
    }
}

fn read_polyline(r: &mut ByteReader) -> Result<Polyline> {
    let n = r.u32()? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push((r.f64()?, r.f64()?, r.f64()?));
    }
    Ok(Polyline { points })
}

fn write_traj(w: &mut ByteWriter, t: &[TrajPoint]) {
    w.u32(t.len() as u32);
    for p in t {
        w.f64(p.x);
        w.f64(p.y);
        w.f64(p.theta);
        w.f64(p.v);
    }
}

fn read_traj(r: &mut ByteReader) -> Result<Vec<TrajPoint>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(TrajPoint {
            x: r.f64()?,
            y: r.f64()?,
            theta: r.f64()?,
            v: r.f64()?,
        });
    }
    Ok(out)
}

fn encode_scenario(sc: &Scenario) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(sc.id);
    w.u8(sc.map.kind.to_u8());
    w.f64(sc.dt);
    w.u32(sc.map.lanes.len() as u32);
    for lane in &sc.map.lanes {
        write_polyline(&mut w, lane);
    }
    w.u32(sc.map.lights.len() as u32);
    for l in &sc.map.lights {
        w.u8(l.phase.index() as u8);
        w.f64(l.pose.x);
        w.f64(l.pose.y);
        w.f64(l.pose.theta);
        w.u32(l.lane as u32);
        w.f64(l.stop_s);
    }
    w.u32(sc.routes.len() as u32);
    for route in &sc.routes {
        write_polyline(&mut w, route);
    }
    w.u32(sc.ego as u32);
    w.u32(sc.agents.len() as u32);
    for a in &sc.agents {
        w.u8(match a.kind {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
        });
        w.f64(a.init.x);
        w.f64(a.init.y);
        w.f64(a.init.theta);
        w.f64(a.init.v);
        w.f64(a.init.length);
        w.f64(a.init.width);
        write_traj(&mut w, &a.history);
        write_traj(&mut w, &a.future);
    }
    w.buf
}

fn decode_scenario(bytes: &[u8]) -> Result<Scenario> {
    let mut r = ByteReader::new(bytes);
    let id = r.u64()?;
    let kind = MapKind::from_u8(r.u8()?)?;
    let dt = r.f64()?;
    let n_lanes = r.u32()? as usize;
    let mut lanes = Vec::with_capacity(n_lanes);
    for _ in 0..n_lanes {
        lanes.push(read_polyline(&mut r)?);
    }
    let n_lights = r.u32()? as usize;
    let mut lights = Vec::with_capacity(n_lights);
    for _ in 0..n_lights {
        lights.push(TrafficLight {
            phase: LightPhase::from_u8(r.u8()?)?,
            pose: Pose::new(r.f64()?, r.f64()?, r.f64()?),
            lane: r.u32()? as usize,
            stop_s: r.f64()?,
        });
    }
    let n_routes = r.u32()? as usize;
    let mut routes = Vec::with_capacity(n_routes);
    for _ in 0..n_routes {
        routes.push(read_polyline(&mut r)?);
    }
    let ego = r.u32()? as usize;
    let n_agents = r.u32()? as usize;
    let mut agents = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let kind = match r.u8()? {
            0 => AgentKind::Vehicle,
            1 => AgentKind::Pedestrian,
            v => return Err(MdgError::data(format!("unknown agent kind {v}"))),
        };
        let init = AgentState {
            x: r.f64()?,
            y: r.f64()?,
            theta: r.f64()?,
            v: r.f64()?,
            length: r.f64()?,
            width: r.f64()?,
        };
        let history = read_traj(&mut r)?;
        let future = read_traj(&mut r)?;
        agents.push(Agent {
            kind,
            init,
            history,
            future,
        });
    }
    if r.pos != bytes.len() {
        return Err(MdgError::data("dataset record has trailing bytes"));
    }
    Ok(Scenario {
        id,
        map: RoadMap {
            kind,
            lanes,
            lights,
        },
        agents,
        ego,
        routes,
        dt,
    })
}

/// Write a dataset file:
///
/// ```text
/// magic "MDGDATA1", u32 version, u64 generator seed, u32 generator
/// version, u32 count, u64 offsets[count] (relative to records start),
/// u64 records length, records (u32 length prefix + payload each),
/// 32-byte SHA-256 of the records region.
/// ```
pub fn save_dataset(scenarios: &[Scenario], seed: u64, path: &Path) -> Result<()> {
    let mut records = ByteWriter::new();
    let mut offsets = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        offsets.push(records.buf.len() as u64);
        let payload = encode_scenario(sc);
        records.u32(payload.len() as u32);
        records.buf.extend_from_slice(&payload);
    }
    let mut head = ByteWriter::new();
    head.buf.extend_from_slice(DATA_MAGIC);
    head.u32(DATA_VERSION);
    head.u64(seed);
    head.u32(GENERATOR_VERSION);
    head.u32(scenarios.len() as u32);
    for off in &offsets {
        head.u64(*off);
    }
    head.u64(records.buf.len() as u64);
    let digest = Sha256::digest(&records.buf);
    let mut out = head.buf;
    out.extend_from_slice(&records.buf);
    out.extend_from_slice(&digest);
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct Dataset {
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(8).map_err(|_| MdgError::data("dataset truncated"))?;
    if magic != DATA_MAGIC {
        return Err(MdgError::data("bad dataset magic"));
    }
    let version = r.u32()?;
    if version != DATA_VERSION {
        return Err(MdgError::data(format!(
            "dataset version mismatch: file {version}, supported {DATA_VERSION}"
        )));
    }
    let seed = r.u64()?;
    let _genver = r.u32()?;
    let count = r.u32()? as usize;
    let mut offsets = Vec::with_capacity(count);
    for _ in 0..count {
        offsets.push(r.u64()? as usize);
    }
    let records_len = r.u64()? as usize;
    let records = r
        .take(records_len)
        .map_err(|_| MdgError::data("dataset truncated in records region"))?;
    let digest = r
        .take(32)
        .map_err(|_| MdgError::data("dataset truncated before checksum"))?;
    if r.pos != bytes.len() {
        return Err(MdgError::data("dataset has trailing bytes"));
    }
    let want = Sha256::digest(records);
    if digest != want.as_slice() {
        return Err(MdgError::data("dataset checksum failure"));
    }
    // Walk the records and cross-check the manifest.
    let mut scenarios = Vec::with_capacity(count);
    let mut rr = ByteReader::new(records);
    let mut actual = 0usize;
    while rr.pos < records.len() {
        let at = rr.pos;
        if actual < offsets.len() && offsets[actual] != at as u64 as usize {
            return Err(MdgError::data(format!(
                "manifest offset mismatch at record {actual}"
            )));
        }
        let len = rr.u32()? as usize;
        let payload = rr.take(len)?;
        scenarios.push(decode_scenario(payload)?);
        actual += 1;
    }
    if actual != count {
        return Err(MdgError::data(format!(
            "manifest count mismatch: expected {count}, file contains {actual}"
        )));
    }
    Ok(Dataset { seed, scenarios })
}
