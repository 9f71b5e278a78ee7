//! Inference: masked-denoising generation, guidance imposition, and
//! closed-loop rollout with plan reuse.
//!
//! Generation starts from Gaussian noise in normalized action space and
//! alternates denoiser calls with re-noising to the next mask in the
//! schedule. Because level 0 carries alpha = 1 exactly, the final
//! re-noise is the identity and the returned actions equal the last
//! clean estimate. No graph in this module supports backpropagation.

use crate::error::{MdgError, Result};
use crate::kinematics::{
    inverse_dynamics, rollout, rollout_graph, ActionTensor, AgentState, StateTensor, CHUNK, DT,
};
use crate::model::{build_context, chunk_end_states, denoise, encode_scene, Model, SceneContext};
use crate::noisefield::{
    compose_guidance, renoise, AlphaSchedule, InferenceSchedule, Level, NoiseMask,
};
use crate::rng::StreamKey;
use crate::synthworld::{Agent, Scenario, TrajPoint};
use crate::tensor::Graph;

/// Goal-directed guidance: target agents and world-frame goal points.
#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub targets: Vec<(usize, (f64, f64))>,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub scenario: &'a Scenario,
    pub schedule: &'a InferenceSchedule,
    pub num_samples: usize,
    pub seed: u64,
    pub guidance: Option<GuidanceSpec>,
}

/// Bookkeeping for one denoising iteration.
#[derive(Debug, Clone)]
pub struct TraceStep {
    /// Mask fed to the denoiser at this iteration.
    pub mask: NoiseMask,
    /// Whether the objective was applied to the clean estimate.
    pub guided: bool,
}

#[derive(Debug, Clone)]
pub struct GenerationSample {
    /// Final clean normalized actions.
    pub actions: ActionTensor,
    /// World-frame rollout of `actions` from the scenario's current states.
    pub states: StateTensor,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub samples: Vec<GenerationSample>,
    pub denoiser_calls: usize,
}

fn check_guidance(spec: &GuidanceSpec, sc: &Scenario) {
    for &(agent, (gx, gy)) in &spec.targets {
        assert!(agent < sc.n_agents(), "guidance target {agent} out of range");
        let st = &sc.agents[agent].init;
        let d = ((gx - st.x).powi(2) + (gy - st.y).powi(2)).sqrt();
        assert!(
            d <= 500.0,
            "goal for agent {agent} is {d:.0} m away, beyond the 500 m sanity radius"
        );
    }
}

/// Guidance mask: the guidance level on every step of each target agent.
fn guidance_mask(spec: &GuidanceSpec, n: usize, ta: usize) -> NoiseMask {
    let mut g = NoiseMask::uniform(n, ta, Level::CLEAN);
    for &(agent, _) in &spec.targets {
        for t in 0..ta {
            g.set(agent, t, Level::Guidance);
        }
    }
    g
}

/// The built-in goal objective: translate the target agent's clean
/// trajectory by a linearly ramped offset that moves its endpoint onto
/// the goal, then re-fit actions through inverse dynamics so the result
/// stays dynamics-feasible.
fn apply_goal_objective(
    actions: &mut ActionTensor,
    init_world: &[AgentState],
    spec: &GuidanceSpec,
    dt: f64,
) {
    let t_total = actions.steps * CHUNK;
    for &(agent, (gx, gy)) in &spec.targets {
        // Isolate this agent's rollout in the world frame.
        let sub_init = [init_world[agent]];
        let mut sub = ActionTensor::zeros(1, actions.steps);
        for k in 0..actions.steps {
            sub.set(0, k, 0, actions.get(agent, k, 0));
            sub.set(0, k, 1, actions.get(agent, k, 1));
        }
        let states = rollout(&sub_init, &sub, dt);
        let (ex, ey) = states.position(0, t_total - 1);
        let (ux, uy) = (gx - ex, gy - ey);

        // Ramped translation; headings and speeds re-derived from the
        // displaced positions, holding the original heading when nearly
        // stationary.
        let mut pts = Vec::with_capacity(t_total + 1);
        pts.push((init_world[agent].x, init_world[agent].y));
        for t in 0..t_total {
            let w = (t + 1) as f64 / t_total as f64;
            let (x, y) = states.position(0, t);
            pts.push((x + w * ux, y + w * uy));
        }
        let mut new_states = StateTensor::zeros(1, t_total);
        let mut prev_theta = init_world[agent].theta;
        for t in 0..t_total {
            let (x0, y0) = pts[t];
            let (x1, y1) = pts[t + 1];
            let (dx, dy) = (x1 - x0, y1 - y0);
            let step_len = (dx * dx + dy * dy).sqrt();
            let theta = if step_len > 0.02 {
                dy.atan2(dx)
            } else {
                prev_theta
            };
            prev_theta = theta;
            let v = step_len / dt;
            let (sn, cs) = theta.sin_cos();
            new_states.set(0, t, 0, x1);
            new_states.set(0, t, 1, y1);
            new_states.set(0, t, 2, theta);
            new_states.set(0, t, 3, v * cs);
            new_states.set(0, t, 4, v * sn);
        }
        let refit = inverse_dynamics(&new_states, &sub_init, dt);
        for k in 0..actions.steps {
            actions.set(agent, k, 0, refit.get(0, k, 0));
            actions.set(agent, k, 1, refit.get(0, k, 1));
        }
    }
}

/// One denoiser invocation: noised normalized actions in, clean
/// normalized action estimate out.
fn denoiser_pass(
    model: &Model,
    ctx: &SceneContext,
    z: &[f64],
    mask: &NoiseMask,
    sched: &AlphaSchedule,
) -> ActionTensor {
    let n = ctx.n_agents;
    let ta = model.cfg.t_a();
    let g = Graph::inference();
    let bind = model.store.bind(&g);
    let enc = encode_scene(&g, &bind, &model.cfg, ctx);
    let za = g.constant(z.to_vec(), &[n, ta, 2]);
    let local_init = ctx.local_init_states();
    let noised_states = rollout_graph(&local_init, &za, DT);
    let z_states = chunk_end_states(&noised_states, model.cfg.chunk);
    let est = denoise(&g, &bind, &model.cfg, ctx, &enc, &z_states, mask, sched);
    ActionTensor {
        n_agents: n,
        steps: ta,
        values: est.value(),
    }
}

/// Masked denoising generation, optionally with guidance imposition.
pub fn generate(model: &Model, req: &GenerationRequest) -> Result<GenerationResult> {
    let sc = req.scenario;
    let ctx = build_context(sc);
    let n = ctx.n_agents;
    let ta = model.cfg.t_a();
    let sched = AlphaSchedule::linear(model.cfg.k_levels);
    req.schedule.check_invariants(&sched);
    for m in &req.schedule.masks {
        if m.n_agents != n || m.steps != ta {
            return Err(MdgError::data(format!(
                "schedule mask is {}x{}, scenario needs {}x{}",
                m.n_agents, m.steps, n, ta
            )));
        }
    }
    if let Some(spec) = &req.guidance {
        check_guidance(spec, sc);
    }
    let g_mask = req
        .guidance
        .as_ref()
        .map(|spec| guidance_mask(spec, n, ta));
    let init_world = sc.init_states();

    let steps = req.schedule.denoise_steps();
    let mut samples = Vec::with_capacity(req.num_samples);
    let mut denoiser_calls = 0usize;
    for sample_idx in 0..req.num_samples {
        let key = StreamKey::root(req.seed).child(0x6765_6e65).child(sample_idx as u64);
        let mut rng = key.stream();
        let mut z: Vec<f64> = rng.normals(n * ta * 2);
        let mut estimate = ActionTensor::zeros(n, ta);
        let mut trace = Vec::with_capacity(steps);
        for l in 0..steps {
            let mask_l = &req.schedule.masks[l];
            estimate = denoiser_pass(model, &ctx, &z, mask_l, &sched);
            denoiser_calls += 1;
            let mut guided = false;
            if let Some(spec) = &req.guidance {
                apply_goal_objective(&mut estimate, &init_world, spec, sc.dt);
                guided = true;
            }
            let m_next = &req.schedule.masks[l + 1];
            let m_eff = match &g_mask {
                Some(gm) => compose_guidance(m_next, gm, &sched),
                None => m_next.clone(),
            };
            z = renoise(&estimate.values, 2, &m_eff, &sched, &mut rng);
            trace.push(TraceStep {
                mask: mask_l.clone(),
                guided,
            });
        }
        let states = rollout(&init_world, &estimate, sc.dt);
        samples.push(GenerationSample {
            actions: estimate,
            states,
            trace,
        });
    }
    Ok(GenerationResult {
        samples,
        denoiser_calls,
    })
}

// ── closed-loop rollout ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ClosedLoopConfig {
    /// Episode length in base steps.
    pub episode_steps: usize,
    /// Base steps between replans (10 = 1 Hz at dt 0.1).
    pub replan_period: usize,
    pub reuse: bool,
    pub seed: u64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        ClosedLoopConfig {
            episode_steps: 80,
            replan_period: 10,
            reuse: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanRecord {
    /// Base-step index at which this plan was made.
    pub at_step: usize,
    /// World-frame plan over the full horizon.
    pub states: StateTensor,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    /// Executed world-frame trajectory, (N, episode_steps, 5).
    pub executed: StateTensor,
    pub plans: Vec<PlanRecord>,
    pub denoiser_calls: usize,
}

/// Advance the world history by a batch of executed steps.
struct World {
    agents: Vec<Agent>,
    history: usize,
}

impl World {
    fn from_scenario(sc: &Scenario) -> World {
        World {
            agents: sc.agents.clone(),
            history: sc.agents.first().map_or(0, |a| a.history.len()),
        }
    }

    fn as_scenario(&self, base: &Scenario) -> Scenario {
        let mut sc = base.clone();
        sc.agents = self.agents.clone();
        for a in sc.agents.iter_mut() {
            a.future.clear();
        }
        sc
    }

    fn apply(&mut self, executed: &StateTensor, from: usize, count: usize) {
        for (i, agent) in self.agents.iter_mut().enumerate() {
            for t in from..from + count {
                let p = TrajPoint {
                    x: executed.get(i, t, 0),
                    y: executed.get(i, t, 1),
                    theta: executed.get(i, t, 2),
                    v: executed.speed(i, t),
                };
                agent.history.push(p);
            }
            let h = self.history;
            let len = agent.history.len();
            agent.history.drain(..len - h);
            let last = *agent.history.last().unwrap();
            agent.init.x = last.x;
            agent.init.y = last.y;
            agent.init.theta = last.theta;
            agent.init.v = last.v;
        }
    }
}

/// Run one closed-loop episode: replan at a fixed cadence, execute the
/// first segment of each plan. With reuse, subsequent replans shift the
/// previous actions, pad the tail by repeating the final action, lightly
/// re-noise at level 1, and run a single denoiser pass.
pub fn run_episode(
    model: &Model,
    scenario: &Scenario,
    cfg: &ClosedLoopConfig,
) -> Result<EpisodeResult> {
    let ta = model.cfg.t_a();
    let plan_steps = ta * CHUNK;
    assert!(
        cfg.replan_period % CHUNK == 0,
        "replan period must align with action chunks"
    );
    assert!(
        plan_steps % cfg.replan_period == 0,
        "replan period must divide the plan horizon"
    );
    assert!(
        cfg.episode_steps % cfg.replan_period == 0,
        "episode length must be a whole number of replans"
    );
    let n = scenario.n_agents();
    let sched = AlphaSchedule::linear(model.cfg.k_levels);
    let one_step = crate::noisefield::build_schedule(
        crate::noisefield::ScheduleMode::OneStep,
        1,
        n,
        ta,
        model.cfg.k_levels,
    );

    let mut world = World::from_scenario(scenario);
    let mut executed = StateTensor::zeros(n, cfg.episode_steps);
    let mut plans = Vec::new();
    let mut denoiser_calls = 0usize;
    let mut prev_actions: Option<ActionTensor> = None;
    let shift_tokens = cfg.replan_period / CHUNK;

    let replans = cfg.episode_steps / cfg.replan_period;
    for k in 0..replans {
        let at_step = k * cfg.replan_period;
        let view = world.as_scenario(scenario);
        let init_world = view.init_states();
        let actions = match (&prev_actions, cfg.reuse) {
            (Some(prev), true) => {
                // Shift left by the executed tokens, repeat the tail.
                let mut shifted = ActionTensor::zeros(n, ta);
                for a in 0..n {
                    for t in 0..ta {
                        let src = (t + shift_tokens).min(ta - 1);
                        shifted.set(a, t, 0, prev.get(a, src, 0));
                        shifted.set(a, t, 1, prev.get(a, src, 1));
                    }
                }
                let level1 = NoiseMask::uniform(n, ta, Level::Index(1));
                let mut rng = StreamKey::root(cfg.seed)
                    .child(0x7265_7573)
                    .child(k as u64)
                    .stream();
                let (z, _) =
                    crate::noisefield::apply_noise(&shifted.values, 2, &level1, &sched, &mut rng);
                let ctx = build_context(&view);
                denoiser_calls += 1;
                denoiser_pass(model, &ctx, &z, &level1, &sched)
            }
            _ => {
                let req = GenerationRequest {
                    scenario: &view,
                    schedule: &one_step,
                    num_samples: 1,
                    seed: StreamKey::root(cfg.seed).child(k as u64).stream().next_u64(),
                    guidance: None,
                };
                let out = generate(model, &req)?;
                denoiser_calls += out.denoiser_calls;
                out.samples.into_iter().next().unwrap().actions
            }
        };
        let plan_states = rollout(&init_world, &actions, scenario.dt);
        // Execute the first replan-period steps.
        for a in 0..n {
            for t in 0..cfg.replan_period {
                for c in 0..5 {
                    executed.set(a, at_step + t, c, plan_states.get(a, t, c));
                }
            }
        }
        world.apply(&executed, at_step, cfg.replan_period);
        plans.push(PlanRecord {
            at_step,
            states: plan_states,
        });
        prev_actions = Some(actions);
    }
    Ok(EpisodeResult {
        executed,
        plans,
        denoiser_calls,
    })
}
