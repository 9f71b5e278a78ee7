//! Differentiable unicycle dynamics.
//!
//! Actions are (acceleration, yaw rate) pairs held constant over a chunk of
//! base integration steps. The update order is semi-implicit: velocity and
//! heading first, then position with the updated values. Headings are
//! wrapped into (-pi, pi] after every sub-step.

use crate::tensor::{wrap_angle, Graph, Tensor};

/// Base integration step in seconds.
pub const DT: f64 = 0.1;
/// Base steps per action token.
pub const CHUNK: usize = 2;
/// Channelwise normalization of (acceleration, yaw rate).
pub const ACTION_MEAN: [f64; 2] = [0.0, 0.0];
pub const ACTION_STD: [f64; 2] = [1.0, 0.5];

/// A rigid pose in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose { x, y, theta }
    }

    /// Express a world point in this pose's frame.
    pub fn world_to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = wx - self.x;
        let dy = wy - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn local_to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn heading_to_local(&self, world_theta: f64) -> f64 {
        wrap_angle(world_theta - self.theta)
    }

    pub fn heading_to_world(&self, local_theta: f64) -> f64 {
        wrap_angle(local_theta + self.theta)
    }
}

/// Physical state of one agent plus its static extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub length: f64,
    pub width: f64,
}

impl AgentState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }
}

/// Normalized (acceleration, yaw rate) tokens over (agent, chunked step).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTensor {
    pub n_agents: usize,
    pub steps: usize,
    /// Row-major (agent, step, channel) with 2 channels.
    pub values: Vec<f64>,
}

impl ActionTensor {
    pub fn zeros(n_agents: usize, steps: usize) -> Self {
        ActionTensor {
            n_agents,
            steps,
            values: vec![0.0; n_agents * steps * 2],
        }
    }

    pub fn get(&self, agent: usize, step: usize, ch: usize) -> f64 {
        self.values[(agent * self.steps + step) * 2 + ch]
    }

    pub fn set(&mut self, agent: usize, step: usize, ch: usize, v: f64) {
        self.values[(agent * self.steps + step) * 2 + ch] = v;
    }

    pub fn assert_finite(&self) {
        assert!(
            self.values.iter().all(|v| v.is_finite()),
            "non-finite action value"
        );
    }
}

pub const STATE_CHANNELS: usize = 5;

/// Physical states over (agent, base step) with channels (x, y, theta, vx, vy).
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub n_agents: usize,
    pub steps: usize,
    pub values: Vec<f64>,
}

impl StateTensor {
    pub fn zeros(n_agents: usize, steps: usize) -> Self {
        StateTensor {
            n_agents,
            steps,
            values: vec![0.0; n_agents * steps * STATE_CHANNELS],
        }
    }

    pub fn get(&self, agent: usize, step: usize, ch: usize) -> f64 {
        self.values[(agent * self.steps + step) * STATE_CHANNELS + ch]
    }

    pub fn set(&mut self, agent: usize, step: usize, ch: usize, v: f64) {
        self.values[(agent * self.steps + step) * STATE_CHANNELS + ch] = v;
    }

    pub fn position(&self, agent: usize, step: usize) -> (f64, f64) {
        (self.get(agent, step, 0), self.get(agent, step, 1))
    }

    /// Signed speed recovered by projecting (vx, vy) onto the heading.
    pub fn speed(&self, agent: usize, step: usize) -> f64 {
        let th = self.get(agent, step, 2);
        let (s, c) = th.sin_cos();
        self.get(agent, step, 3) * c + self.get(agent, step, 4) * s
    }
}

pub fn normalize_actions(raw: &ActionTensor) -> ActionTensor {
    let mut out = raw.clone();
    for a in 0..raw.n_agents {
        for t in 0..raw.steps {
            for ch in 0..2 {
                out.set(a, t, ch, (raw.get(a, t, ch) - ACTION_MEAN[ch]) / ACTION_STD[ch]);
            }
        }
    }
    out
}

pub fn denormalize_actions(norm: &ActionTensor) -> ActionTensor {
    let mut out = norm.clone();
    for a in 0..norm.n_agents {
        for t in 0..norm.steps {
            for ch in 0..2 {
                out.set(a, t, ch, norm.get(a, t, ch) * ACTION_STD[ch] + ACTION_MEAN[ch]);
            }
        }
    }
    out
}

/// Integrate normalized actions from initial states. Plain-array twin of
/// [`rollout_graph`]; both use identical arithmetic order so their outputs
/// agree bitwise.
pub fn rollout(init: &[AgentState], actions: &ActionTensor, dt: f64) -> StateTensor {
    assert!(dt > 0.0, "rollout requires dt > 0");
    assert_eq!(init.len(), actions.n_agents, "rollout agent count mismatch");
    actions.assert_finite();
    let n = init.len();
    let t_total = actions.steps * CHUNK;
    let mut out = StateTensor::zeros(n, t_total);
    for a in 0..n {
        let mut x = init[a].x;
        let mut y = init[a].y;
        let mut th = init[a].theta;
        let mut v = init[a].v;
        for k in 0..actions.steps {
            let acc = actions.get(a, k, 0) * ACTION_STD[0] + ACTION_MEAN[0];
            let yaw = actions.get(a, k, 1) * ACTION_STD[1] + ACTION_MEAN[1];
            for s in 0..CHUNK {
                v += acc * dt;
                th = wrap_angle(th + yaw * dt);
                let ct = th.cos();
                let st = th.sin();
                let vx = v * ct;
                let vy = v * st;
                x += vx * dt;
                y += vy * dt;
                let t = k * CHUNK + s;
                out.set(a, t, 0, x);
                out.set(a, t, 1, y);
                out.set(a, t, 2, th);
                out.set(a, t, 3, vx);
                out.set(a, t, 4, vy);
            }
        }
    }
    out
}

/// Graph version of [`rollout`]: actions is an (N, T_a, 2) tensor of
/// normalized actions; returns an (N, T, 5) state tensor differentiable
/// w.r.t. the actions.
pub fn rollout_graph(init: &[AgentState], actions: &Tensor, dt: f64) -> Tensor {
    assert!(dt > 0.0, "rollout requires dt > 0");
    let g: Graph = actions.graph().clone();
    let shape = actions.shape();
    assert_eq!(shape.len(), 3, "actions must be (N, T_a, 2)");
    assert_eq!(shape[0], init.len(), "rollout agent count mismatch");
    assert_eq!(shape[2], 2, "actions must have 2 channels");
    let n = init.len();
    let ta = shape[1];

    let mut x = g.constant(init.iter().map(|s| s.x).collect(), &[n]);
    let mut y = g.constant(init.iter().map(|s| s.y).collect(), &[n]);
    let mut th = g.constant(init.iter().map(|s| s.theta).collect(), &[n]);
    let mut v = g.constant(init.iter().map(|s| s.v).collect(), &[n]);

    let mut rows: Vec<Tensor> = Vec::with_capacity(ta * CHUNK);
    for k in 0..ta {
        let tok = actions.narrow(1, k, 1); // (n, 1, 2)
        let acc = tok.narrow(2, 0, 1).reshape(&[n]).mul_scalar(ACTION_STD[0]);
        let yaw = tok.narrow(2, 1, 1).reshape(&[n]).mul_scalar(ACTION_STD[1]);
        for _ in 0..CHUNK {
            v = v.add(&acc.mul_scalar(dt));
            th = th.add(&yaw.mul_scalar(dt)).wrap_angle();
            let ct = th.cos();
            let st = th.sin();
            let vx = v.mul(&ct);
            let vy = v.mul(&st);
            x = x.add(&vx.mul_scalar(dt));
            y = y.add(&vy.mul_scalar(dt));
            let row = g.concat(
                &[
                    &x.reshape(&[n, 1, 1]),
                    &y.reshape(&[n, 1, 1]),
                    &th.reshape(&[n, 1, 1]),
                    &vx.reshape(&[n, 1, 1]),
                    &vy.reshape(&[n, 1, 1]),
                ],
                2,
            );
            rows.push(row);
        }
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    g.concat(&refs, 1)
}

/// Recover normalized actions from a state trajectory. Exact on
/// trajectories produced by [`rollout`] (per-chunk constant controls).
pub fn inverse_dynamics(states: &StateTensor, init: &[AgentState], dt: f64) -> ActionTensor {
    assert!(dt > 0.0, "inverse_dynamics requires dt > 0");
    assert_eq!(states.n_agents, init.len(), "agent count mismatch");
    assert!(
        states.steps % CHUNK == 0,
        "state length {} is not a multiple of chunk {}",
        states.steps,
        CHUNK
    );
    assert!(
        states.values.iter().all(|v| v.is_finite()),
        "non-finite state value"
    );
    let n = states.n_agents;
    let t_total = states.steps;
    let ta = t_total / CHUNK;
    let mut raw = ActionTensor::zeros(n, ta);
    for a in 0..n {
        // Per-base-step controls, then averaged within each chunk.
        let mut v_prev = init[a].v;
        let mut th_prev = init[a].theta;
        let mut accs = vec![0.0; t_total];
        let mut yaws = vec![0.0; t_total];
        for t in 0..t_total {
            let v_t = states.speed(a, t);
            let th_t = states.get(a, t, 2);
            accs[t] = (v_t - v_prev) / dt;
            yaws[t] = wrap_angle(th_t - th_prev) / dt;
            v_prev = v_t;
            th_prev = th_t;
        }
        for k in 0..ta {
            let mut am = 0.0;
            let mut wm = 0.0;
            for s in 0..CHUNK {
                am += accs[k * CHUNK + s];
                wm += yaws[k * CHUNK + s];
            }
            raw.set(a, k, 0, am / CHUNK as f64);
            raw.set(a, k, 1, wm / CHUNK as f64);
        }
    }
    normalize_actions(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use std::f64::consts::PI;

    fn still_agent() -> AgentState {
        AgentState {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
            v: 0.0,
            length: 4.5,
            width: 2.0,
        }
    }

    #[test]
    fn zero_actions_stay_at_equilibrium() {
        let init = [still_agent()];
        let actions = ActionTensor::zeros(1, 10);
        let st = rollout(&init, &actions, DT);
        for t in 0..st.steps {
            assert_eq!(st.get(0, t, 0), 0.0);
            assert_eq!(st.get(0, t, 1), 0.0);
            assert_eq!(st.get(0, t, 2), 0.0);
            assert_eq!(st.speed(0, t), 0.0);
        }
    }

    /// Independent scalar recurrence used as the oracle for rollout values.
    fn scalar_oracle(
        init: (f64, f64, f64, f64),
        controls: &[(f64, f64)], // denormalized per-base-step (a, w)
        dt: f64,
    ) -> Vec<(f64, f64, f64, f64)> {
        let (mut x, mut y, mut th, mut v) = init;
        let mut out = Vec::new();
        for &(a, w) in controls {
            v += a * dt;
            th = wrap_angle(th + w * dt);
            x += v * th.cos() * dt;
            y += v * th.sin() * dt;
            out.push((x, y, th, v));
        }
        out
    }

    #[test]
    fn constant_acceleration_matches_scalar_oracle() {
        let init = [still_agent()];
        // a = 1 m/s^2, w = 0, 10 base steps = 5 chunks.
        let mut actions = ActionTensor::zeros(1, 5);
        for k in 0..5 {
            actions.set(0, k, 0, 1.0 / ACTION_STD[0]);
        }
        let st = rollout(&init, &actions, DT);
        let controls: Vec<(f64, f64)> = (0..10).map(|_| (1.0, 0.0)).collect();
        let oracle = scalar_oracle((0.0, 0.0, 0.0, 0.0), &controls, DT);
        let last = oracle.last().unwrap();
        assert!((last.3 - 1.0).abs() < 1e-12, "v = {}", last.3);
        for t in 0..10 {
            assert_eq!(st.get(0, t, 0), oracle[t].0, "x at step {t}");
            assert!((st.speed(0, t) - oracle[t].3).abs() < 1e-12, "v at step {t}");
        }
    }

    #[test]
    fn yaw_rate_wraps_heading_against_oracle() {
        let mut init = still_agent();
        init.v = 1.0;
        // w = pi rad/s for 1 s -> heading pi, wrapped.
        let mut actions = ActionTensor::zeros(1, 5);
        for k in 0..5 {
            actions.set(0, k, 1, PI / ACTION_STD[1]);
        }
        let st = rollout(&[init], &actions, DT);
        let controls: Vec<(f64, f64)> = (0..10).map(|_| (0.0, PI)).collect();
        let oracle = scalar_oracle((0.0, 0.0, 0.0, 1.0), &controls, DT);
        for t in 0..10 {
            assert_eq!(st.get(0, t, 2), oracle[t].2, "theta at {t}");
            assert_eq!(st.get(0, t, 0), oracle[t].0, "x at {t}");
            assert_eq!(st.get(0, t, 1), oracle[t].1, "y at {t}");
        }
        assert!((st.get(0, 9, 2) - PI).abs() < 1e-12);
        assert!(st.get(0, 9, 2) <= PI);
    }

    #[test]
    fn graph_rollout_matches_plain_rollout_bitwise() {
        let mut s = StreamKey::root(21).stream();
        let init: Vec<AgentState> = (0..3)
            .map(|_| AgentState {
                x: s.next_range(-10.0, 10.0),
                y: s.next_range(-10.0, 10.0),
                theta: s.next_range(-PI, PI),
                v: s.next_range(0.0, 10.0),
                length: 4.5,
                width: 2.0,
            })
            .collect();
        let mut actions = ActionTensor::zeros(3, 8);
        for v in actions.values.iter_mut() {
            *v = s.next_range(-1.5, 1.5);
        }
        let plain = rollout(&init, &actions, DT);
        let g = Graph::new();
        let at = g.constant(actions.values.clone(), &[3, 8, 2]);
        let st = rollout_graph(&init, &at, DT);
        assert_eq!(st.shape(), vec![3, 16, STATE_CHANNELS]);
        let gv = st.value();
        for (a, b) in plain.values.iter().zip(&gv) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rollout_gradients_match_finite_difference() {
        use crate::tensor::tests::{assert_grads_close, finite_diff};
        let mut s = StreamKey::root(31).stream();
        let init: Vec<AgentState> = (0..2)
            .map(|_| AgentState {
                x: 0.0,
                y: 0.0,
                theta: s.next_range(-1.0, 1.0),
                v: s.next_range(0.0, 5.0),
                length: 4.5,
                width: 2.0,
            })
            .collect();
        let a0: Vec<f64> = (0..2 * 4 * 2).map(|_| s.next_range(-1.0, 1.0)).collect();
        let g = Graph::new();
        let at = g.tensor(a0.clone(), &[2, 4, 2], true);
        let loss = rollout_graph(&init, &at, DT).pow_const(2.0).sum_all();
        g.backward(&loss);
        let ad = at.grad().unwrap();
        let f = |v: &[f64]| {
            let g = Graph::new();
            let at = g.tensor(v.to_vec(), &[2, 4, 2], false);
            rollout_graph(&init, &at, DT)
                .pow_const(2.0)
                .sum_all()
                .scalar_value()
        };
        let fd = finite_diff(&f, &a0, 1e-5);
        assert_grads_close(&ad, &fd, 1e-4, "rollout");
    }

    #[test]
    fn inverse_dynamics_roundtrip_is_exact_on_rollout_data() {
        let mut s = StreamKey::root(41).stream();
        let init: Vec<AgentState> = (0..4)
            .map(|_| AgentState {
                x: s.next_range(-20.0, 20.0),
                y: s.next_range(-20.0, 20.0),
                theta: s.next_range(-PI, PI),
                v: s.next_range(0.0, 10.0),
                length: 4.5,
                width: 2.0,
            })
            .collect();
        let mut actions = ActionTensor::zeros(4, 10);
        for v in actions.values.iter_mut() {
            *v = s.next_range(-1.0, 1.0);
        }
        let st = rollout(&init, &actions, DT);
        let rec = inverse_dynamics(&st, &init, DT);
        for (a, b) in actions.values.iter().zip(&rec.values) {
            assert!((a - b).abs() < 1e-9, "recovered {b} vs original {a}");
        }
    }

    #[test]
    fn constant_velocity_yields_zero_actions() {
        let init = AgentState {
            x: 0.0,
            y: 0.0,
            theta: 0.3,
            v: 5.0,
            length: 4.5,
            width: 2.0,
        };
        let mut st = StateTensor::zeros(1, 8);
        let (s, c) = init.theta.sin_cos();
        for t in 0..8 {
            let d = 5.0 * DT * (t + 1) as f64;
            st.set(0, t, 0, d * c);
            st.set(0, t, 1, d * s);
            st.set(0, t, 2, init.theta);
            st.set(0, t, 3, 5.0 * c);
            st.set(0, t, 4, 5.0 * s);
        }
        let rec = inverse_dynamics(&st, &[init], DT);
        for v in &rec.values {
            assert!(v.abs() < 1e-9, "expected zero action, got {v}");
        }
    }

    #[test]
    fn normalization_roundtrip_and_table_values() {
        let mut raw = ActionTensor::zeros(1, 1);
        raw.set(0, 0, 0, 1.0);
        raw.set(0, 0, 1, 0.5);
        let norm = normalize_actions(&raw);
        assert_eq!(norm.get(0, 0, 0), 1.0);
        assert_eq!(norm.get(0, 0, 1), 1.0);
        let back = denormalize_actions(&norm);
        assert_eq!(back.get(0, 0, 0), 1.0);
        assert_eq!(back.get(0, 0, 1), 0.5);
        // zero maps to zero
        let z = normalize_actions(&ActionTensor::zeros(2, 3));
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_equivariance() {
        let mut s = StreamKey::root(51).stream();
        let phi = 0.83_f64;
        let init: Vec<AgentState> = (0..3)
            .map(|_| AgentState {
                x: s.next_range(-5.0, 5.0),
                y: s.next_range(-5.0, 5.0),
                theta: s.next_range(-PI, PI),
                v: s.next_range(0.0, 8.0),
                length: 4.5,
                width: 2.0,
            })
            .collect();
        let mut actions = ActionTensor::zeros(3, 6);
        for v in actions.values.iter_mut() {
            *v = s.next_range(-1.0, 1.0);
        }
        let rotate = |st: &AgentState| AgentState {
            x: phi.cos() * st.x - phi.sin() * st.y,
            y: phi.sin() * st.x + phi.cos() * st.y,
            theta: wrap_angle(st.theta + phi),
            ..*st
        };
        let rot_init: Vec<AgentState> = init.iter().map(rotate).collect();
        let a = rollout(&init, &actions, DT);
        let b = rollout(&rot_init, &actions, DT);
        for ag in 0..3 {
            for t in 0..a.steps {
                let (x, y) = a.position(ag, t);
                let rx = phi.cos() * x - phi.sin() * y;
                let ry = phi.sin() * x + phi.cos() * y;
                let (bx, by) = b.position(ag, t);
                assert!((rx - bx).abs() < 1e-9 && (ry - by).abs() < 1e-9);
                let dth = wrap_angle(a.get(ag, t, 2) + phi - b.get(ag, t, 2));
                assert!(dth.abs() < 1e-9);
            }
        }
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_action_panics() {
        let mut actions = ActionTensor::zeros(1, 2);
        actions.set(0, 0, 0, f64::NAN);
        rollout(&[still_agent()], &actions, DT);
    }

    #[test]
    #[should_panic(expected = "multiple of chunk")]
    fn odd_state_length_panics() {
        let st = StateTensor::zeros(1, 5);
        inverse_dynamics(&st, &[still_agent()], DT);
    }
}
