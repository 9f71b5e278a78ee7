//! Loss, optimizer, and training-loop tests.

use super::*;
use crate::model::{Model, ModelConfig};
use crate::synthworld::{generate_dataset, generate_scenario, GenConfig, MapKind};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        encoder_layers: 1,
        mixer_layers: 1,
        denoiser_blocks: 1,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

fn gt_tensor(n: usize, t: usize, fill: impl Fn(usize, usize, usize) -> f64) -> StateTensor {
    let mut st = StateTensor::zeros(n, t);
    for a in 0..n {
        for s in 0..t {
            for c in 0..5 {
                st.set(a, s, c, fill(a, s, c));
            }
        }
    }
    st
}

#[test]
fn denoising_loss_zero_on_identical_states() {
    let gt = gt_tensor(2, 4, |a, s, c| (a + s + c) as f64 * 0.1);
    let g = Graph::new();
    let est = g.constant(gt.values.clone(), &[2, 4, 5]);
    let loss = denoising_loss(&est, &gt, &[true, true]);
    assert!(loss.scalar_value() < 1e-30);
}

#[test]
fn denoising_loss_unit_offset_arithmetic() {
    // A single valid cell with a 1 m offset in x: squared error 1 over
    // six compared channels.
    let gt = gt_tensor(1, 1, |_, _, _| 0.0);
    let g = Graph::new();
    let est = g.constant(vec![1.0, 0.0, 0.0, 0.0, 0.0], &[1, 1, 5]);
    let loss = denoising_loss(&est, &gt, &[true]);
    assert!((loss.scalar_value() - 1.0 / 6.0).abs() < 1e-12);
}

#[test]
fn denoising_loss_matches_scalar_oracle() {
    // Hand-computed 2-agent, 3-step case with one invalid agent.
    let gt = gt_tensor(2, 3, |a, s, c| (a * 31 + s * 7 + c) as f64 * 0.05);
    let mut est_vals = gt.values.clone();
    // Perturb agent 0 only; agent 1 is invalid and must not contribute.
    for (i, v) in est_vals.iter_mut().enumerate() {
        if i < 15 {
            *v += 0.1 * (i as f64 + 1.0);
        } else {
            *v += 100.0;
        }
    }
    let g = Graph::new();
    let est = g.constant(est_vals.clone(), &[2, 3, 5]);
    let loss = denoising_loss(&est, &gt, &[true, false]).scalar_value();
    // Independent scalar computation.
    let mut want = 0.0;
    for s in 0..3 {
        let base = s * 5;
        let dx = est_vals[base] - gt.get(0, s, 0);
        let dy = est_vals[base + 1] - gt.get(0, s, 1);
        let (es, ec) = est_vals[base + 2].sin_cos();
        let (gs, gc) = gt.get(0, s, 2).sin_cos();
        let dvx = est_vals[base + 3] - gt.get(0, s, 3);
        let dvy = est_vals[base + 4] - gt.get(0, s, 4);
        want += dx * dx + dy * dy + (es - gs).powi(2) + (ec - gc).powi(2) + dvx * dvx + dvy * dvy;
    }
    want /= (1 * 3 * 6) as f64;
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn prediction_loss_zero_when_one_modality_exact() {
    let n = 1;
    let m = 3;
    let t = 4;
    let gt = gt_tensor(n, t, |_, s, c| if c < 3 { s as f64 * 0.3 + c as f64 } else { 0.0 });
    let g = Graph::new();
    let mut pv = vec![5.0; n * m * t * 3];
    // Modality 1 matches ground truth exactly.
    for s in 0..t {
        for c in 0..3 {
            pv[((n - 1) * m + 1) * t * 3 + s * 3 + c] = gt.get(0, s, c);
        }
    }
    let preds = g.constant(pv, &[n, m, t, 3]);
    let loss = prediction_loss(&preds, &gt, &[true]);
    assert!(loss.scalar_value() < 1e-30);
}

#[test]
fn prediction_loss_selects_argmin_modality() {
    // Two modalities: one 10 m off, one 0.1 m off; only the close one
    // must contribute.
    let n = 1;
    let t = 2;
    let gt = gt_tensor(n, t, |_, _, _| 0.0);
    let g = Graph::new();
    let mut pv = vec![0.0; n * 2 * t * 3];
    for s in 0..t {
        pv[s * 3] = 10.0; // modality 0 x-offset
        pv[t * 3 + s * 3] = 0.1; // modality 1 x-offset
    }
    let preds = g.constant(pv, &[n, 2, t, 3]);
    let loss = prediction_loss(&preds, &gt, &[true]).scalar_value();
    // smooth-L1 of 0.1 is 0.005; mean over t*3 = 6 channel-steps.
    let want = (0.5 * 0.1 * 0.1) * t as f64 / (t * 3) as f64;
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn smooth_l1_kink_values() {
    // Per-coordinate error 0.5 -> 0.125; error 2.0 -> 1.5.
    let g = Graph::new();
    let x = g.constant(vec![0.5, 2.0], &[2]);
    let h = x.huber(1.0).value();
    assert!((h[0] - 0.125).abs() < 1e-15);
    assert!((h[1] - 1.5).abs() < 1e-15);
}

#[test]
fn lr_schedule_golden_values() {
    let cfg = TrainConfig::default();
    assert!((lr_at(&cfg, 1000) - 2e-4).abs() < 1e-18);
    assert!((lr_at(&cfg, 3000) - 1.96e-4).abs() < 1e-18);
    assert!((lr_at(&cfg, 500) - 1e-4).abs() < 1e-18);
    assert!((lr_at(&cfg, 2999) - 2e-4).abs() < 1e-18);
    assert!((lr_at(&cfg, 5000) - 2e-4 * 0.98 * 0.98).abs() < 1e-18);
}

fn toy_samples(count: usize, n_agents: usize, seed: u64) -> Vec<Scenario> {
    let cfg = GenConfig {
        n_agents,
        ..GenConfig::default()
    };
    generate_dataset(&MapKind::all(), count, &cfg, seed).unwrap()
}

#[test]
fn train_step_finite_loss_and_identity() {
    let mut model = Model::new(tiny_cfg(), 5);
    let scs = toy_samples(2, 4, 11);
    let samples: Vec<Sample> = scs.iter().map(tokenize).collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        threads: 1,
        ..TrainConfig::default()
    };
    let report = train_step(&mut model, &batch, &cfg, 0, 1).unwrap();
    assert!(report.l_d.is_finite() && report.l_d > 0.0);
    assert!(report.l_p.is_finite() && report.l_p > 0.0);
    assert_eq!(report.total, report.l_d + cfg.lambda * report.l_p);
    assert!(report.grad_norm <= cfg.grad_clip + 1e-12);
}

#[test]
fn training_is_deterministic_and_parallel_invariant() {
    let scs = toy_samples(4, 4, 13);
    let run = |threads: usize| -> Vec<f64> {
        let mut model = Model::new(tiny_cfg(), 5);
        let cfg = TrainConfig {
            threads,
            epochs: 2,
            batch_size: 2,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let reports = train(&mut model, &scs, &cfg, None, None).unwrap();
        reports.iter().flat_map(|r| [r.l_d, r.l_p, r.total]).collect()
    };
    let serial = run(1);
    let parallel = run(0);
    for (a, b) in serial.iter().zip(&parallel) {
        assert_eq!(a.to_bits(), b.to_bits(), "thread count changed results");
    }
    let again = run(1);
    for (a, b) in serial.iter().zip(&again) {
        assert_eq!(a.to_bits(), b.to_bits(), "rerun changed results");
    }
}

#[test]
fn gradient_clip_bounds_update_norm() {
    // With a huge base lr the clip keeps the applied gradient at norm 1.
    let mut model = Model::new(tiny_cfg(), 6);
    let scs = toy_samples(1, 4, 17);
    let samples: Vec<Sample> = scs.iter().map(tokenize).collect();
    let batch: Vec<&Sample> = samples.iter().collect();
    let cfg = TrainConfig {
        threads: 1,
        grad_clip: 0.05,
        ..TrainConfig::default()
    };
    let report = train_step(&mut model, &batch, &cfg, 0, 1).unwrap();
    assert!(report.grad_norm <= 0.05 + 1e-12);
}

#[test]
fn end_to_end_gradients_match_finite_difference() {
    use crate::tensor::tests::rel_err;
    // 2-agent micro-model; total loss through denoiser and encoder.
    let micro = ModelConfig {
        d: 8,
        heads: 2,
        encoder_layers: 1,
        mixer_layers: 1,
        denoiser_blocks: 1,
        ffn_mult: 2,
        horizon: 8,
        ..ModelConfig::default()
    };
    let gen_cfg = GenConfig {
        n_agents: 2,
        horizon: 8,
        ..GenConfig::default()
    };
    let sc = generate_scenario(MapKind::Straight, &gen_cfg, 23, 0).unwrap();
    let sample = tokenize(&sc);
    let sched = AlphaSchedule::linear(micro.k_levels);
    let mut mask_rng = StreamKey::root(9).stream();
    let mask = sample_training_mask(
        2,
        micro.t_a(),
        0.5,
        MaskAxis::Temporal,
        micro.k_levels,
        &mut mask_rng,
    );

    let loss_with = |model: &Model| -> f64 {
        let mut noise_rng = StreamKey::root(31).stream();
        let ctx = &sample.ctx;
        let (z, _) = apply_noise(&sample.gt_actions.values, 2, &mask, &sched, &mut noise_rng);
        let g = Graph::new();
        let bind = model.store.bind(&g);
        let enc = crate::model::encode_scene(&g, &bind, &model.cfg, ctx);
        let za = g.constant(z, &[2, model.cfg.t_a(), 2]);
        let local_init = ctx.local_init_states();
        let noised = rollout_graph(&local_init, &za, DT);
        let zs = chunk_end_states(&noised, model.cfg.chunk);
        let est = crate::model::denoise(&g, &bind, &model.cfg, ctx, &enc, &zs, &mask, &sched);
        let est_states = rollout_graph(&local_init, &est, DT);
        let l_d = denoising_loss(&est_states, &sample.gt_local, &ctx.agent_valid);
        let preds = crate::model::aux_predict(&bind, &model.cfg, &enc);
        let l_p = prediction_loss(&preds, &sample.gt_local, &ctx.agent_valid);
        l_d.add(&l_p.mul_scalar(5.0)).scalar_value()
    };

    // Analytic gradients once.
    let model = Model::new(micro.clone(), 7);
    let mut noise_rng = StreamKey::root(31).stream();
    let ctx = &sample.ctx;
    let (z, _) = apply_noise(&sample.gt_actions.values, 2, &mask, &sched, &mut noise_rng);
    let g = Graph::new();
    let bind = model.store.bind(&g);
    let enc = crate::model::encode_scene(&g, &bind, &model.cfg, ctx);
    let za = g.constant(z, &[2, model.cfg.t_a(), 2]);
    let local_init = ctx.local_init_states();
    let noised = rollout_graph(&local_init, &za, DT);
    let zs = chunk_end_states(&noised, model.cfg.chunk);
    let est = crate::model::denoise(&g, &bind, &model.cfg, ctx, &enc, &zs, &mask, &sched);
    let est_states = rollout_graph(&local_init, &est, DT);
    let l_d = denoising_loss(&est_states, &sample.gt_local, &ctx.agent_valid);
    let preds = crate::model::aux_predict(&bind, &model.cfg, &enc);
    let l_p = prediction_loss(&preds, &sample.gt_local, &ctx.agent_valid);
    let total = l_d.add(&l_p.mul_scalar(5.0));
    g.backward(&total);
    let grads = model.store.grads_from(&bind);

    // Spot-check a slice of parameters across the network.
    let names = [
        "agent_mixer.embed.w",
        "rel.fc1.w",
        "enc0.attn.wq.w",
        "den0.temporal.attn.wv.w",
        "den0.scene.attn.wo.w",
        "den_out.fc2.w",
        "mask_embed",
        "aux_head.fc1.w",
    ];
    let h = 1e-6;
    let mut checked = 0;
    for name in names {
        for idx in [0usize, 3] {
            let base = Model::new(micro.clone(), 7);
            if idx >= base.store.get(name).data.len() {
                continue;
            }
            let mut plus = Model::new(micro.clone(), 7);
            plus.store.get_mut(name).data[idx] += h;
            let mut minus = Model::new(micro.clone(), 7);
            minus.store.get_mut(name).data[idx] -= h;
            let fd = (loss_with(&plus) - loss_with(&minus)) / (2.0 * h);
            let ad = grads[name][idx];
            let e = rel_err(ad, fd);
            assert!(e < 1e-3, "{name}[{idx}]: ad {ad} fd {fd} rel {e}");
            checked += 1;
        }
    }
    assert!(checked >= 12, "too few coordinates checked");
}

#[test]
fn perturb_zero_magnitude_is_identity() {
    let sc = toy_samples(1, 4, 19).pop().unwrap();
    let mut rng = StreamKey::root(3).stream();
    let out = perturb_augment(&sc, 0.0, &mut rng);
    assert_eq!(out, sc);
}

#[test]
fn perturb_touches_only_ego_and_stays_consistent() {
    let sc = toy_samples(1, 5, 21).pop().unwrap();
    let mut rng = StreamKey::root(5).stream();
    let out = perturb_augment(&sc, 1.0, &mut rng);
    for (i, (a, b)) in sc.agents.iter().zip(&out.agents).enumerate() {
        if i == sc.ego {
            assert_ne!(a, b, "ego must change");
        } else {
            assert_eq!(a, b, "non-ego agent {i} changed");
        }
    }
    // Re-fit future passes the inverse-dynamics round trip.
    let gt = out.gt_states();
    let init = out.init_states();
    let actions = inverse_dynamics(&gt, &init, out.dt);
    let re = rollout(&init, &actions, out.dt);
    let t = out.horizon() - 1;
    for a in 0..out.n_agents() {
        let (x0, y0) = gt.position(a, t);
        let (x1, y1) = re.position(a, t);
        let d = ((x0 - x1).powi(2) + (y0 - y1).powi(2)).sqrt();
        assert!(d < 0.5, "endpoint displacement {d}");
    }
    // The ego still rejoins its original endpoint closely.
    let ego = out.ego;
    let d_end = {
        let a = sc.agents[ego].future.last().unwrap();
        let b = out.agents[ego].future.last().unwrap();
        ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
    };
    assert!(d_end < 0.6, "ego drifted {d_end} m at the endpoint");
}

#[test]
fn random_mask_policy_covers_levels() {
    let mut rng = StreamKey::root(7).stream();
    let mask = sample_mask_with_policy(MaskPolicy::Random, 6, 10, 0.5, MaskAxis::Temporal, 5, &mut rng);
    let mut seen = [false; 6];
    for l in &mask.levels {
        match l {
            Level::Index(i) => seen[*i as usize] = true,
            Level::Guidance => panic!("guidance in training mask"),
        }
    }
    assert!(seen.iter().filter(|&&s| s).count() >= 4);
}
