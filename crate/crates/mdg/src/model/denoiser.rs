//! The mask-conditioned trajectory denoiser.
//!
//! Input tokens are per-chunk physical states from rolling noised actions
//! through the dynamics, plus additive mask-level and timestep embeddings.
//! Each block applies intra-agent temporal self-attention, inter-agent
//! cross-attention with relation encodings, and agent-scene cross-attention
//! (ego-only route conditioning), each with its own feed-forward layer.
//! An output MLP decodes normalized actions.

use crate::model::attention::{attention, attention_pairwise, sinusoid_embedding, AttnParams};
use crate::model::context::SceneContext;
use crate::model::encoder::EncodedScene;
use crate::model::params::{Binding, Init, Linear, Mlp, Norm, ParamStore};
use crate::model::{splice_rows, ModelConfig};
use crate::noisefield::{AlphaSchedule, Level, NoiseMask};
use crate::tensor::{Graph, Tensor};

/// Denoiser input channels: the five physical state channels plus the
/// two chunk-wise finite-difference controls (normalized acceleration and
/// yaw rate) recovered from the state sequence. The derived channels make
/// near-clean inputs directly legible to the output head instead of
/// requiring the attention stack to learn numerical differentiation.
pub const DEN_IN_CHANNELS: usize = crate::kinematics::STATE_CHANNELS + 2;

/// Initial anchor-gate logits: the posterior interpolation weight for a
/// Gaussian signal prior with variance `V` under corruption at alpha,
/// w = alpha V / (alpha V + 1 - alpha), squashed through the logistic.
/// Rows 0..=K are the discrete levels; the last row is the guidance
/// value, which training never visits and therefore keeps this prior.
fn gate_init(k: usize, sched: &AlphaSchedule) -> Vec<f64> {
    let v = 0.25;
    let mut rows = Vec::with_capacity(k + 2);
    for row in 0..k + 2 {
        let alpha = if row <= k {
            sched.alpha(Level::Index(row as u8))
        } else {
            sched.alpha(Level::Guidance)
        };
        let w = (alpha * v / (alpha * v + 1.0 - alpha)).clamp(1e-4, 1.0 - 1e-4);
        rows.push((w / (1.0 - w)).ln());
    }
    rows
}

pub fn register_denoiser(store: &mut ParamStore, mc: &ModelConfig) {
    let d = mc.d;
    Mlp::register(store, "den_in", DEN_IN_CHANNELS, d, d);
    store.register(
        "mask_embed",
        &[mc.k_levels + 2, d],
        Init::Normal(0.02),
        false,
    );
    Linear::register(store, "mask_alpha", d, d);
    let sched = AlphaSchedule::linear(mc.k_levels);
    store.register(
        "den_gate",
        &[mc.k_levels + 2, 1],
        Init::Values(gate_init(mc.k_levels, &sched)),
        false,
    );
    for b in 0..mc.denoiser_blocks {
        for sub in ["temporal", "agent", "scene"] {
            let base = format!("den{b}.{sub}");
            Norm::register(store, &format!("{base}.norm1"), d);
            AttnParams::register(store, &format!("{base}.attn"), d);
            Norm::register(store, &format!("{base}.norm2"), d);
            Mlp::register(store, &format!("{base}.ffn"), d, mc.ffn_mult * d, d);
        }
        AttnParams::register(store, &format!("den{b}.route.attn"), d);
    }
    Norm::register(store, "den_final_norm", d);
    Mlp::register(store, "den_out", d, d, 2);
}

/// Embedding row index for a noise level: 0..=K discrete, K+1 guidance.
fn level_row(level: Level, k: usize) -> usize {
    match level {
        Level::Index(i) => i as usize,
        Level::Guidance => k + 1,
    }
}

/// Denoise per-chunk noised states into a clean normalized action
/// estimate, (N, T_a, 2).
pub fn denoise(
    g: &Graph,
    bind: &Binding,
    mc: &ModelConfig,
    ctx: &SceneContext,
    enc: &EncodedScene,
    z_states: &Tensor,
    mask: &NoiseMask,
    sched: &AlphaSchedule,
) -> Tensor {
    let n = ctx.n_agents;
    let ta = mc.t_a();
    let d = mc.d;
    let zsh = z_states.shape();
    assert_eq!(
        zsh,
        vec![n, ta, crate::kinematics::STATE_CHANNELS],
        "denoiser input must be (N, T_a, 5)"
    );
    assert_eq!(mask.n_agents, n, "mask agent extent mismatch");
    assert_eq!(mask.steps, ta, "mask step extent mismatch");

    // Recover the per-chunk controls from the state sequence: speeds
    // project (vx, vy) onto the heading; differencing against the
    // previous chunk end (or the local initial state) reproduces the
    // noised actions exactly for chunk-constant controls.
    let dt_chunk = crate::kinematics::DT * mc.chunk as f64;
    let th = z_states.narrow(2, 2, 1);
    let vx = z_states.narrow(2, 3, 1);
    let vy = z_states.narrow(2, 4, 1);
    let v = vx.mul(&th.cos()).add(&vy.mul(&th.sin())); // (N, T_a, 1)
    let v0 = g.constant(
        ctx.init_states.iter().map(|s| s.v).collect(),
        &[n, 1, 1],
    );
    let v_prev = g.concat(&[&v0, &v.narrow(1, 0, ta - 1)], 1);
    let acc = v
        .sub(&v_prev)
        .mul_scalar(1.0 / (dt_chunk * crate::kinematics::ACTION_STD[0]));
    // Local-frame rollouts start at heading zero.
    let th0 = g.zeros(&[n, 1, 1]);
    let th_prev = g.concat(&[&th0, &th.narrow(1, 0, ta - 1)], 1);
    let yaw = th
        .sub(&th_prev)
        .wrap_angle()
        .mul_scalar(1.0 / (dt_chunk * crate::kinematics::ACTION_STD[1]));
    let feats = g.concat(&[z_states, &acc, &yaw], 2); // (N, T_a, 7)
    // The recovered channels are exactly the noised normalized actions.
    let z_actions = g.concat(&[&acc, &yaw], 2); // (N, T_a, 2)

    // Input MLP plus additive mask-level and timestep embeddings.
    let den_in = Mlp::bind(bind, "den_in");
    let mut x = den_in.forward(&feats);

    let rows: Vec<usize> = mask
        .levels
        .iter()
        .map(|&l| level_row(l, mc.k_levels))
        .collect();
    let level_emb = bind.get("mask_embed").index_select(&rows);
    // Continuous alpha awareness: a sinusoidal embedding of alpha(m)
    // through a learned projection, covering the guidance value.
    let alphas: Vec<f64> = mask.levels.iter().map(|&l| 20.0 * sched.alpha(l)).collect();
    let alpha_emb = Linear::bind(bind, "mask_alpha").forward(&sinusoid_embedding(g, &alphas, d));
    let mask_emb = level_emb.add(&alpha_emb).reshape(&[n, ta, d]);
    x = x.add(&mask_emb);

    let steps: Vec<f64> = (0..ta).map(|t| t as f64).collect();
    let time_emb = sinusoid_embedding(g, &steps, d); // (T_a, D), broadcast over agents
    x = x.add(&time_emb);

    let e_s = ctx.n_scene();
    let rel_aa = enc.relations.narrow(0, 0, n).narrow(1, 0, n);
    let rel_as = enc.relations.narrow(0, 0, n).narrow(1, 0, e_s);

    for b in 0..mc.denoiser_blocks {
        // Intra-agent temporal self-attention.
        {
            let base = format!("den{b}.temporal");
            let n1 = Norm::bind(bind, &format!("{base}.norm1"));
            let attn_p = AttnParams::bind(bind, &format!("{base}.attn"), mc.heads);
            let n2 = Norm::bind(bind, &format!("{base}.norm2"));
            let ffn = Mlp::bind(bind, &format!("{base}.ffn"));
            let xn = n1.forward(&x);
            let a = attention(&xn, &xn, None, None, &attn_p);
            x = x.add(&a);
            x = x.add(&ffn.forward(&n2.forward(&x)));
        }
        // Inter-agent interaction cross-attention at each timestep.
        {
            let base = format!("den{b}.agent");
            let n1 = Norm::bind(bind, &format!("{base}.norm1"));
            let attn_p = AttnParams::bind(bind, &format!("{base}.attn"), mc.heads);
            let n2 = Norm::bind(bind, &format!("{base}.norm2"));
            let ffn = Mlp::bind(bind, &format!("{base}.ffn"));
            let xn = n1.forward(&x).transpose(0, 1); // (T_a, N, D)
            let a = attention_pairwise(&xn, &xn, &rel_aa, Some(&ctx.agent_valid), &attn_p);
            x = x.add(&a.transpose(0, 1));
            x = x.add(&ffn.forward(&n2.forward(&x)));
        }
        // Agent-scene conditioning; only the ego row sees its route.
        {
            let base = format!("den{b}.scene");
            let n1 = Norm::bind(bind, &format!("{base}.norm1"));
            let attn_p = AttnParams::bind(bind, &format!("{base}.attn"), mc.heads);
            let n2 = Norm::bind(bind, &format!("{base}.norm2"));
            let ffn = Mlp::bind(bind, &format!("{base}.ffn"));
            let xn = n1.forward(&x);
            let mut a = attention(
                &xn,
                &enc.scene_feats,
                Some(&rel_as),
                Some(&enc.scene_valid),
                &attn_p,
            );
            if let Some(route_tokens) = &enc.route_tokens {
                let route_p = AttnParams::bind(bind, &format!("den{b}.route.attn"), mc.heads);
                let q_ego = xn.narrow(0, ctx.ego, 1); // (1, T_a, D)
                let rel_er = enc
                    .relations
                    .narrow(0, ctx.ego, 1)
                    .narrow(1, e_s, ctx.n_routes); // (1, N_r, D)
                let route_out = attention(&q_ego, route_tokens, Some(&rel_er), None, &route_p);
                let ego_row = a.narrow(0, ctx.ego, 1).add(&route_out);
                a = splice_rows(g, &a, ctx.ego, &ego_row);
            }
            x = x.add(&a);
            x = x.add(&ffn.forward(&n2.forward(&x)));
        }
    }

    let final_norm = Norm::bind(bind, "den_final_norm");
    let den_out = Mlp::bind(bind, "den_out");
    let pred = den_out.forward(&final_norm.forward(&x));
    // Gated interpolation between the recovered input actions and the
    // context prediction: est = w(m) * z + (1 - w(m)) * pred, with one
    // learned logit per mask level. High-alpha positions stay anchored
    // to their inputs while heavily noised ones defer to the context.
    let gate_logits = bind.get("den_gate").index_select(&rows).reshape(&[n, ta, 1]);
    // logistic via tanh
    let w = gate_logits.mul_scalar(0.5).tanh().add_scalar(1.0).mul_scalar(0.5);
    pred.add(&w.mul(&z_actions.sub(&pred)))
}
