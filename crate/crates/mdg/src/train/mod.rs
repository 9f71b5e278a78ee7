//! Training: the denoising and winner-take-all prediction losses, the
//! adaptive masking loop, gradient clipping, the decoupled-weight-decay
//! adaptive-moment optimizer, and state-perturbation augmentation.

use crate::error::{MdgError, Result};
use crate::kinematics::{
    inverse_dynamics, rollout, rollout_graph, ActionTensor, StateTensor, CHUNK, DT,
};
use crate::model::{
    aux_predict, build_context, chunk_end_states, denoise, encode_scene, Model, SceneContext,
};
use crate::noisefield::{
    apply_noise, batch_mask_rates, sample_training_mask, AlphaSchedule, Level, MaskAxis, NoiseMask,
};
use crate::rng::{Stream, StreamKey};
use crate::synthworld::Scenario;
use crate::tensor::{Graph, Tensor};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;

/// How training masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    /// Adaptive masking: batch-graded rates over the temporal or agent axis.
    Adaptive,
    /// Independent uniform levels per position (ablation baseline).
    Random,
}

impl MaskPolicy {
    pub fn tag(&self) -> &'static str {
        match self {
            MaskPolicy::Adaptive => "adaptive",
            MaskPolicy::Random => "random",
        }
    }

    pub fn from_tag(s: &str) -> Option<MaskPolicy> {
        match s {
            "adaptive" => Some(MaskPolicy::Adaptive),
            "random" => Some(MaskPolicy::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub warmup_steps: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_policy: MaskPolicy,
    /// Perturbation-augmentation magnitude in [0, 1]; 0 disables.
    pub perturb: f64,
    /// Worker cap for per-sample parallelism; 0 uses all cores.
    pub threads: usize,
    /// Checkpoint cadence in epochs (0 = final only).
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 5.0,
            lr: 2e-4,
            warmup_steps: 1000,
            decay_every: 2000,
            decay_factor: 0.98,
            grad_clip: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            batch_size: 8,
            seed: 0,
            mask_policy: MaskPolicy::Adaptive,
            perturb: 0.0,
            threads: 0,
            ckpt_every: 0,
        }
    }
}

/// Learning rate at a 1-based step: linear warmup, then stepwise decay.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step <= cfg.warmup_steps {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let k = (step - cfg.warmup_steps) / cfg.decay_every;
        cfg.lr * cfg.decay_factor.powi(k as i32)
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub l_d: f64,
    pub l_p: f64,
    pub total: f64,
    pub grad_norm: f64,
    /// Mean squared state error per discrete noise level.
    pub per_level: Vec<(usize, f64)>,
}

/// Mean squared state error over valid cells. Headings are compared via
/// their sine/cosine pair, so six channels enter the mean: x, y, sin, cos,
/// vx, vy. Invalid agents are excluded from numerator and denominator.
pub fn denoising_loss(est_states: &Tensor, gt: &StateTensor, valid: &[bool]) -> Tensor {
    let g = est_states.graph().clone();
    let sh = est_states.shape();
    let (n, t) = (sh[0], sh[1]);
    assert_eq!(gt.n_agents, n, "loss agent extent mismatch");
    assert_eq!(gt.steps, t, "loss step extent mismatch");
    assert_eq!(valid.len(), n);
    let valid_agents = valid.iter().filter(|&&v| v).count();
    assert!(valid_agents > 0, "denoising loss over zero valid cells");

    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let w = g.constant(weights, &[n, 1, 1]);

    let pos = est_states.narrow(2, 0, 2);
    let th = est_states.narrow(2, 2, 1);
    let vel = est_states.narrow(2, 3, 2);

    let mut gt_pos = Vec::with_capacity(n * t * 2);
    let mut gt_trig = Vec::with_capacity(n * t * 2);
    let mut gt_vel = Vec::with_capacity(n * t * 2);
    for a in 0..n {
        for s in 0..t {
            gt_pos.push(gt.get(a, s, 0));
            gt_pos.push(gt.get(a, s, 1));
            let (sn, cs) = gt.get(a, s, 2).sin_cos();
            gt_trig.push(sn);
            gt_trig.push(cs);
            gt_vel.push(gt.get(a, s, 3));
            gt_vel.push(gt.get(a, s, 4));
        }
    }
    let gt_pos = g.constant(gt_pos, &[n, t, 2]);
    let gt_trig = g.constant(gt_trig, &[n, t, 2]);
    let gt_vel = g.constant(gt_vel, &[n, t, 2]);

    let est_trig = g.concat(&[&th.sin(), &th.cos()], 2);
    let d_pos = pos.sub(&gt_pos).pow_const(2.0).mul(&w).sum_all();
    let d_trig = est_trig.sub(&gt_trig).pow_const(2.0).mul(&w).sum_all();
    let d_vel = vel.sub(&gt_vel).pow_const(2.0).mul(&w).sum_all();
    let denom = (valid_agents * t * 6) as f64;
    d_pos
        .add(&d_trig)
        .add(&d_vel)
        .mul_scalar(1.0 / denom)
}

/// Winner-take-all prediction loss: per agent, the modality with the
/// smallest summed planar distance to ground truth takes a smooth-L1
/// penalty over (x, y, theta); heading differences are wrapped.
pub fn prediction_loss(preds: &Tensor, gt: &StateTensor, valid: &[bool]) -> Tensor {
    let g = preds.graph().clone();
    let sh = preds.shape();
    let (n, m, t) = (sh[0], sh[1], sh[2]);
    assert_eq!(sh[3], 3, "predictions must carry (x, y, theta)");
    assert_eq!(gt.steps, t, "prediction horizon mismatch");
    let valid_agents = valid.iter().filter(|&&v| v).count();
    assert!(valid_agents > 0, "prediction loss over zero valid agents");

    // Modality selection happens outside the graph.
    let pv = preds.value();
    let mut winners = Vec::with_capacity(n);
    for a in 0..n {
        let mut best = (0usize, f64::INFINITY);
        for mi in 0..m {
            let mut dist = 0.0;
            for s in 0..t {
                let base = ((a * m + mi) * t + s) * 3;
                let dx = pv[base] - gt.get(a, s, 0);
                let dy = pv[base + 1] - gt.get(a, s, 1);
                dist += (dx * dx + dy * dy).sqrt();
            }
            if dist < best.1 {
                best = (mi, dist);
            }
        }
        winners.push(a * m + best.0);
    }
    let chosen = preds.reshape(&[n * m, t * 3]).index_select(&winners); // (N, T*3)
    let chosen = chosen.reshape(&[n, t, 3]);

    let mut gt_flat = Vec::with_capacity(n * t * 3);
    for a in 0..n {
        for s in 0..t {
            gt_flat.push(gt.get(a, s, 0));
            gt_flat.push(gt.get(a, s, 1));
            gt_flat.push(gt.get(a, s, 2));
        }
    }
    let gt_t = g.constant(gt_flat, &[n, t, 3]);
    let weights: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let w = g.constant(weights, &[n, 1, 1]);

    let diff = chosen.sub(&gt_t);
    let pos_part = diff.narrow(2, 0, 2);
    let th_part = diff.narrow(2, 2, 1).wrap_angle();
    let all = g.concat(&[&pos_part, &th_part], 2);
    let denom = (valid_agents * t * 3) as f64;
    all.huber(1.0).mul(&w).sum_all().mul_scalar(1.0 / denom)
}

/// Tokenized sample ready for corruption: normalized actions plus the
/// context and local-frame targets.
pub struct Sample {
    pub ctx: SceneContext,
    pub gt_local: StateTensor,
    pub gt_actions: ActionTensor,
}

pub fn tokenize(sc: &Scenario) -> Sample {
    let ctx = build_context(sc);
    let gt_local = SceneContext::local_gt_states(sc);
    let gt_actions = inverse_dynamics(&gt_local, &ctx.local_init_states(), sc.dt);
    Sample {
        ctx,
        gt_local,
        gt_actions,
    }
}

pub fn sample_mask_with_policy(
    policy: MaskPolicy,
    n: usize,
    ta: usize,
    delta: f64,
    axis: MaskAxis,
    k: usize,
    rng: &mut Stream,
) -> NoiseMask {
    match policy {
        MaskPolicy::Adaptive => sample_training_mask(n, ta, delta, axis, k, rng),
        MaskPolicy::Random => {
            let mut mask = NoiseMask::uniform(n, ta, Level::CLEAN);
            for a in 0..n {
                for t in 0..ta {
                    mask.set(a, t, Level::Index(rng.next_index(k + 1) as u8));
                }
            }
            mask
        }
    }
}

struct SampleOut {
    grads: BTreeMap<String, Vec<f64>>,
    l_d: f64,
    l_p: f64,
    level_sums: Vec<(f64, usize)>,
}

fn forward_backward(
    model: &Model,
    sample: &Sample,
    mask: &NoiseMask,
    sched: &AlphaSchedule,
    noise_rng: &mut Stream,
    lambda: f64,
) -> Result<SampleOut> {
    let ctx = &sample.ctx;
    let n = ctx.n_agents;
    let ta = model.cfg.t_a();
    let (z, _eps) = apply_noise(&sample.gt_actions.values, 2, mask, sched, noise_rng);

    let g = Graph::new();
    let bind = model.store.bind(&g);
    let enc = encode_scene(&g, &bind, &model.cfg, ctx);
    let za = g.constant(z, &[n, ta, 2]);
    let local_init = ctx.local_init_states();
    let noised_states = rollout_graph(&local_init, &za, DT);
    let z_states = chunk_end_states(&noised_states, model.cfg.chunk);
    let est_actions = denoise(&g, &bind, &model.cfg, ctx, &enc, &z_states, mask, sched);
    let est_states = rollout_graph(&local_init, &est_actions, DT);
    let l_d = denoising_loss(&est_states, &sample.gt_local, &ctx.agent_valid);
    let preds = aux_predict(&bind, &model.cfg, &enc);
    let l_p = prediction_loss(&preds, &sample.gt_local, &ctx.agent_valid);
    let total = l_d.add(&l_p.mul_scalar(lambda));

    let total_v = total.scalar_value();
    if !total_v.is_finite() {
        return Err(MdgError::numeric(format!(
            "non-finite loss {total_v} (mask:\n{})",
            mask.dump()
        )));
    }
    g.backward(&total);

    // Per-level squared-error diagnostics over the six compared channels.
    let ev = est_states.value();
    let t_steps = sample.gt_local.steps;
    let mut level_sums = vec![(0.0, 0usize); model.cfg.k_levels + 2];
    for a in 0..n {
        if !ctx.agent_valid[a] {
            continue;
        }
        for s in 0..t_steps {
            let level = mask.get(a, s / CHUNK);
            let row = match level {
                Level::Index(i) => i as usize,
                Level::Guidance => model.cfg.k_levels + 1,
            };
            let base = (a * t_steps + s) * 5;
            let gt = &sample.gt_local;
            let (gsin, gcos) = gt.get(a, s, 2).sin_cos();
            let (esin, ecos) = ev[base + 2].sin_cos();
            let se = (ev[base] - gt.get(a, s, 0)).powi(2)
                + (ev[base + 1] - gt.get(a, s, 1)).powi(2)
                + (esin - gsin).powi(2)
                + (ecos - gcos).powi(2)
                + (ev[base + 3] - gt.get(a, s, 3)).powi(2)
                + (ev[base + 4] - gt.get(a, s, 4)).powi(2);
            level_sums[row].0 += se / 6.0;
            level_sums[row].1 += 1;
        }
    }

    Ok(SampleOut {
        grads: model.store.grads_from(&bind),
        l_d: l_d.scalar_value(),
        l_p: l_p.scalar_value(),
        level_sums,
    })
}

/// One optimizer step over a batch. Per-sample forward/backward runs in
/// parallel; gradients reduce in sample order so results do not depend on
/// scheduling.
pub fn train_step(
    model: &mut Model,
    batch: &[&Sample],
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    assert!(!batch.is_empty());
    let sched = AlphaSchedule::linear(model.cfg.k_levels);
    let deltas = batch_mask_rates(batch.len());
    let step_key = StreamKey::root(cfg.seed)
        .child(0x7261_696e) // train-loop domain tag
        .child(epoch as u64)
        .child(step as u64);

    let jobs: Vec<(usize, &Sample, f64)> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| (i, *s, deltas[i]))
        .collect();
    let model_ref = &*model;
    let run = |(i, sample, delta): &(usize, &Sample, f64)| -> Result<SampleOut> {
        let mut mask_rng = step_key.child(*i as u64).child(1).stream();
        let axis = if mask_rng.next_bool() {
            MaskAxis::Temporal
        } else {
            MaskAxis::Agent
        };
        let mask = sample_mask_with_policy(
            cfg.mask_policy,
            sample.ctx.n_agents,
            model_ref.cfg.t_a(),
            *delta,
            axis,
            model_ref.cfg.k_levels,
            &mut mask_rng,
        );
        let mut noise_rng = step_key.child(*i as u64).child(2).stream();
        forward_backward(model_ref, sample, &mask, &sched, &mut noise_rng, cfg.lambda)
            .map_err(|e| MdgError::numeric(format!("step {step} sample {i}: {e}")))
    };
    let outs: Vec<Result<SampleOut>> = if cfg.threads == 1 {
        jobs.iter().map(run).collect()
    } else {
        jobs.par_iter().map(run).collect()
    };
    let mut collected = Vec::with_capacity(outs.len());
    for o in outs {
        collected.push(o?);
    }

    // Ordered mean reduction.
    let scale = 1.0 / collected.len() as f64;
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for out in &collected {
        for (name, g) in &out.grads {
            match grads.get_mut(name) {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
                None => {
                    grads.insert(name.clone(), g.iter().map(|v| v * scale).collect());
                }
            }
        }
    }

    // Global-norm clipping.
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g {
            sq += v * v;
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(MdgError::numeric(format!(
            "non-finite gradient norm at step {step}"
        )));
    }
    let clip_scale = if grad_norm > cfg.grad_clip {
        cfg.grad_clip / grad_norm
    } else {
        1.0
    };

    // Decoupled-weight-decay adaptive-moment update.
    let lr = lr_at(cfg, step);
    let t = step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, p) in model.store.iter_mut() {
        let g = &grads[name];
        for i in 0..p.data.len() {
            let gi = g[i] * clip_scale;
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            let mut upd = lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            if p.decay {
                upd += lr * cfg.weight_decay * p.data[i];
            }
            p.data[i] -= upd;
        }
    }
    model.store.assert_finite()?;

    let l_d = collected.iter().map(|o| o.l_d).sum::<f64>() * scale;
    let l_p = collected.iter().map(|o| o.l_p).sum::<f64>() * scale;
    let mut per_level = Vec::new();
    for row in 0..model.cfg.k_levels + 2 {
        let (s, c) = collected
            .iter()
            .map(|o| o.level_sums[row])
            .fold((0.0, 0usize), |acc, v| (acc.0 + v.0, acc.1 + v.1));
        if c > 0 {
            per_level.push((row, s / c as f64));
        }
    }
    Ok(LossReport {
        step,
        lr,
        l_d,
        l_p,
        total: l_d + cfg.lambda * l_p,
        grad_norm: grad_norm * clip_scale,
        per_level,
    })
}

/// Offset the ego's current state and blend the first second of its
/// future back onto the ground truth, then re-fit the future through
/// inverse dynamics so it stays dynamics-consistent. Other agents are
/// untouched; magnitude 0 returns the scenario unchanged.
pub fn perturb_augment(sc: &Scenario, magnitude: f64, rng: &mut Stream) -> Scenario {
    assert!(magnitude >= 0.0, "perturbation magnitude must be >= 0");
    if magnitude == 0.0 {
        return sc.clone();
    }
    let mut out = sc.clone();
    let dx = rng.next_range(-0.5, 0.5) * magnitude;
    let dy = rng.next_range(-0.5, 0.5) * magnitude;
    let dth = rng.next_range(-0.1, 0.1) * magnitude;
    let ego = &mut out.agents[out.ego];

    ego.init.x += dx;
    ego.init.y += dy;
    ego.init.theta = crate::tensor::wrap_angle(ego.init.theta + dth);
    if let Some(last) = ego.history.last_mut() {
        last.x = ego.init.x;
        last.y = ego.init.y;
        last.theta = ego.init.theta;
    }

    // Linearly fading offset over the first second rejoins ground truth.
    let blend_steps = (1.0 / DT) as usize;
    let t_total = ego.future.len();
    let mut blended = StateTensor::zeros(1, t_total);
    for (i, p) in ego.future.iter().enumerate() {
        let wgt = if i < blend_steps {
            1.0 - (i + 1) as f64 / blend_steps as f64
        } else {
            0.0
        };
        let x = p.x + dx * wgt;
        let y = p.y + dy * wgt;
        let th = crate::tensor::wrap_angle(p.theta + dth * wgt);
        let (sn, cs) = th.sin_cos();
        blended.set(0, i, 0, x);
        blended.set(0, i, 1, y);
        blended.set(0, i, 2, th);
        blended.set(0, i, 3, p.v * cs);
        blended.set(0, i, 4, p.v * sn);
    }
    let actions = inverse_dynamics(&blended, &[ego.init], out.dt);
    let refit = rollout(&[ego.init], &actions, out.dt);
    for (i, p) in ego.future.iter_mut().enumerate() {
        p.x = refit.get(0, i, 0);
        p.y = refit.get(0, i, 1);
        p.theta = refit.get(0, i, 2);
        p.v = refit.speed(0, i);
    }
    out
}

/// Full training run; returns all step reports.
pub fn train(
    model: &mut Model,
    scenarios: &[Scenario],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    ckpt_dir: Option<&std::path::Path>,
) -> Result<Vec<LossReport>> {
    assert!(!scenarios.is_empty(), "training needs at least one scenario");
    // Augmentation happens once up front so epochs see a stable dataset.
    let prepared: Vec<Scenario> = if cfg.perturb > 0.0 {
        scenarios
            .iter()
            .enumerate()
            .map(|(i, sc)| {
                let mut rng = StreamKey::root(cfg.seed)
                    .child(0x7065_7274)
                    .child(i as u64)
                    .stream();
                perturb_augment(sc, cfg.perturb, &mut rng)
            })
            .collect()
    } else {
        scenarios.to_vec()
    };
    let samples: Vec<Sample> = prepared.iter().map(tokenize).collect();

    let mut reports = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        // Deterministic per-epoch shuffle.
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = StreamKey::root(cfg.seed)
            .child(0x7368_7566)
            .child(epoch as u64)
            .stream();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.next_index(i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let report = train_step(model, &batch, cfg, epoch, step)?;
            if let Some(log) = log.as_deref_mut() {
                writeln!(
                    log,
                    "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                    report.step, report.lr, report.l_d, report.l_p, report.total, report.grad_norm
                )?;
            }
            reports.push(report);
        }
        if let Some(dir) = ckpt_dir {
            let last = epoch + 1 == cfg.epochs;
            let cadence_hit = cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0;
            if last || cadence_hit {
                model.save(&dir.join(format!("ckpt_epoch{:03}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
