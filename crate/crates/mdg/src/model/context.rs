//! Scene context assembly: raw scenario data expressed in the local
//! frames the model consumes.
//!
//! Agent histories are anchored at each agent's last observed state; map
//! and route polylines at their first waypoint. Every anchor pose is kept
//! so the relation encoder can recover pairwise geometry; nothing
//! downstream ever sees a global coordinate.

use crate::kinematics::{AgentState, Pose};
use crate::synthworld::{AgentKind, Scenario};

pub const AGENT_FEATS: usize = 7; // x, y, theta, vx, vy, length, width
pub const MAP_FEATS: usize = 3; // x, y, theta

#[derive(Debug, Clone)]
pub struct SceneContext {
    pub n_agents: usize,
    pub n_map: usize,
    pub n_lights: usize,
    pub n_routes: usize,
    pub history: usize,
    pub waypoints: usize,
    /// Local-frame agent histories, (N, H, 7) row-major.
    pub agent_feats: Vec<f64>,
    /// 0 = vehicle, 1 = pedestrian.
    pub agent_types: Vec<usize>,
    pub agent_valid: Vec<bool>,
    /// Local-frame map polylines, (N_m, N_w, 3).
    pub map_feats: Vec<f64>,
    /// Traffic light phase indices.
    pub light_phases: Vec<usize>,
    /// Local-frame ego route polylines, (N_r, N_w, 3).
    pub route_feats: Vec<f64>,
    /// Anchor poses for agents, map, lights, routes (in that order).
    pub anchors: Vec<Pose>,
    pub ego: usize,
    /// Current (t = 0) agent states; rollouts for the denoiser run in
    /// each agent's local frame, so only speed matters here, but the
    /// world states are kept for executing plans.
    pub init_states: Vec<AgentState>,
}

impl SceneContext {
    /// Scene entity count (agents + map + lights), excluding routes.
    pub fn n_scene(&self) -> usize {
        self.n_agents + self.n_map + self.n_lights
    }

    /// Total entity count including route polylines.
    pub fn n_entities(&self) -> usize {
        self.n_scene() + self.n_routes
    }

    pub fn scene_valid(&self) -> Vec<bool> {
        let mut v = Vec::with_capacity(self.n_scene());
        v.extend_from_slice(&self.agent_valid);
        v.extend(std::iter::repeat(true).take(self.n_map + self.n_lights));
        v
    }

    /// Local-frame initial states for per-agent rollouts: origin pose,
    /// current speed.
    pub fn local_init_states(&self) -> Vec<AgentState> {
        self.init_states
            .iter()
            .map(|s| AgentState {
                x: 0.0,
                y: 0.0,
                theta: 0.0,
                v: s.v,
                length: s.length,
                width: s.width,
            })
            .collect()
    }

    /// Ground-truth future expressed in each agent's local frame,
    /// (N, T, 5) with channels (x, y, theta, vx, vy).
    pub fn local_gt_states(sc: &Scenario) -> crate::kinematics::StateTensor {
        let n = sc.n_agents();
        let t = sc.horizon();
        let mut st = crate::kinematics::StateTensor::zeros(n, t);
        for (a, agent) in sc.agents.iter().enumerate() {
            let anchor = agent.init.pose();
            for (i, p) in agent.future.iter().enumerate() {
                let (lx, ly) = anchor.world_to_local(p.x, p.y);
                let lth = anchor.heading_to_local(p.theta);
                let (s, c) = lth.sin_cos();
                st.set(a, i, 0, lx);
                st.set(a, i, 1, ly);
                st.set(a, i, 2, lth);
                st.set(a, i, 3, p.v * c);
                st.set(a, i, 4, p.v * s);
            }
        }
        st
    }
}

/// Build the model input context from a scenario.
pub fn build_context(sc: &Scenario) -> SceneContext {
    let n = sc.n_agents();
    assert!(n > 0, "context requires at least one valid agent");
    let history = sc.agents.first().map_or(0, |a| a.history.len());
    let n_map = sc.map.lanes.len();
    let waypoints = sc
        .map
        .lanes
        .first()
        .map_or(0, |l| l.points.len());
    for lane in &sc.map.lanes {
        assert_eq!(lane.points.len(), waypoints, "ragged map polylines");
    }
    let n_lights = sc.map.lights.len();
    let n_routes = sc.routes.len();

    let mut anchors = Vec::with_capacity(n + n_map + n_lights + n_routes);
    let mut agent_feats = vec![0.0; n * history * AGENT_FEATS];
    let mut agent_types = Vec::with_capacity(n);
    for (a, agent) in sc.agents.iter().enumerate() {
        assert_eq!(agent.history.len(), history, "ragged agent histories");
        let anchor = agent.init.pose();
        anchors.push(anchor);
        agent_types.push(match agent.kind {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
        });
        for (h, p) in agent.history.iter().enumerate() {
            let (lx, ly) = anchor.world_to_local(p.x, p.y);
            let lth = anchor.heading_to_local(p.theta);
            let (s, c) = lth.sin_cos();
            let base = (a * history + h) * AGENT_FEATS;
            agent_feats[base] = lx;
            agent_feats[base + 1] = ly;
            agent_feats[base + 2] = lth;
            agent_feats[base + 3] = p.v * c;
            agent_feats[base + 4] = p.v * s;
            agent_feats[base + 5] = agent.init.length;
            agent_feats[base + 6] = agent.init.width;
        }
    }

    let mut map_feats = vec![0.0; n_map * waypoints * MAP_FEATS];
    for (m, lane) in sc.map.lanes.iter().enumerate() {
        let first = lane.points[0];
        let anchor = Pose::new(first.0, first.1, first.2);
        anchors.push(anchor);
        for (w, &(x, y, th)) in lane.points.iter().enumerate() {
            let (lx, ly) = anchor.world_to_local(x, y);
            let base = (m * waypoints + w) * MAP_FEATS;
            map_feats[base] = lx;
            map_feats[base + 1] = ly;
            map_feats[base + 2] = anchor.heading_to_local(th);
        }
    }

    let mut light_phases = Vec::with_capacity(n_lights);
    for light in &sc.map.lights {
        anchors.push(light.pose);
        light_phases.push(light.phase.index());
    }

    let mut route_feats = vec![0.0; n_routes * waypoints * MAP_FEATS];
    for (r, route) in sc.routes.iter().enumerate() {
        assert_eq!(route.points.len(), waypoints, "ragged route polylines");
        let first = route.points[0];
        let anchor = Pose::new(first.0, first.1, first.2);
        anchors.push(anchor);
        for (w, &(x, y, th)) in route.points.iter().enumerate() {
            let (lx, ly) = anchor.world_to_local(x, y);
            let base = (r * waypoints + w) * MAP_FEATS;
            route_feats[base] = lx;
            route_feats[base + 1] = ly;
            route_feats[base + 2] = anchor.heading_to_local(th);
        }
    }

    SceneContext {
        n_agents: n,
        n_map,
        n_lights,
        n_routes,
        history,
        waypoints,
        agent_feats,
        agent_types,
        agent_valid: vec![true; n],
        map_feats,
        light_phases,
        route_feats,
        anchors,
        ego: sc.ego,
        init_states: sc.init_states(),
    }
}
