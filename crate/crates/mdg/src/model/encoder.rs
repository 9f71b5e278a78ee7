//! Scene encoding: modality mixers, the Fourier relation encoder, the
//! query-centric transformer over all scene entities, and the auxiliary
//! trajectory predictor head.

use crate::kinematics::Pose;
use crate::model::attention::{attention_pairwise, AttnParams};
use crate::model::context::{SceneContext, AGENT_FEATS, MAP_FEATS};
use crate::model::params::{Binding, Init, Linear, Mlp, Norm, ParamStore};
use crate::model::{splice_rows, ModelConfig};
use crate::tensor::{wrap_angle, Graph, Tensor};

/// Raw pairwise relation channels: dx, dy (in i's frame), dtheta, distance.
pub const REL_RAW: usize = 4;

/// Fixed constant standing in for degenerate self-relations.
pub const SELF_RELATION: f64 = 1e-3;

// ── MLP-Mixer over (batch, tokens, features) ─────────────────────────

pub struct MixerCfg {
    pub name: String,
    pub tokens: usize,
    pub feat_in: usize,
}

pub fn register_mixer(store: &mut ParamStore, cfg: &MixerCfg, mc: &ModelConfig) {
    let d = mc.d;
    Linear::register(store, &format!("{}.embed", cfg.name), cfg.feat_in, d);
    for i in 0..mc.mixer_layers {
        let b = format!("{}.b{i}", cfg.name);
        Norm::register(store, &format!("{b}.norm1"), d);
        Linear::register(store, &format!("{b}.tok1"), cfg.tokens, cfg.tokens);
        Linear::register(store, &format!("{b}.tok2"), cfg.tokens, cfg.tokens);
        Norm::register(store, &format!("{b}.norm2"), d);
        Mlp::register(store, &format!("{b}.ch"), d, 2 * d, d);
    }
}

/// Run the mixer and max-pool over the token axis: (B, L, F) -> (B, D).
pub fn mixer_forward(
    bind: &Binding,
    cfg: &MixerCfg,
    mc: &ModelConfig,
    x: &Tensor,
) -> Tensor {
    let sh = x.shape();
    assert_eq!(sh[1], cfg.tokens, "{}: token count mismatch", cfg.name);
    assert_eq!(sh[2], cfg.feat_in, "{}: feature dim mismatch", cfg.name);
    let embed = Linear::bind(bind, &format!("{}.embed", cfg.name));
    let mut h = embed.forward(x);
    for i in 0..mc.mixer_layers {
        let b = format!("{}.b{i}", cfg.name);
        let n1 = Norm::bind(bind, &format!("{b}.norm1"));
        let t1 = Linear::bind(bind, &format!("{b}.tok1"));
        let t2 = Linear::bind(bind, &format!("{b}.tok2"));
        let n2 = Norm::bind(bind, &format!("{b}.norm2"));
        let ch = Mlp::bind(bind, &format!("{b}.ch"));
        // Token mixing over the sequence axis.
        let t = n1.forward(&h).transpose(1, 2);
        let t = t2.forward(&t1.forward(&t).gelu()).transpose(1, 2);
        h = h.add(&t);
        // Channel mixing.
        let c = ch.forward(&n2.forward(&h));
        h = h.add(&c);
    }
    h.max_axis(1)
}

// ── relation encoder ─────────────────────────────────────────────────

/// Geometrically spaced spatial frequencies in cycles per meter.
fn fourier_frequencies(f: usize) -> Vec<f64> {
    let lo = 1.0_f64 / 200.0;
    let hi = 2.0_f64;
    (0..f)
        .map(|k| {
            if f == 1 {
                lo
            } else {
                lo * (hi / lo).powf(k as f64 / (f - 1) as f64)
            }
        })
        .collect()
}

/// Raw pairwise relation features for all anchor poses, (E, E, 4).
pub fn relation_raw(anchors: &[Pose]) -> Vec<f64> {
    let e = anchors.len();
    let mut out = vec![0.0; e * e * REL_RAW];
    for i in 0..e {
        for j in 0..e {
            let base = (i * e + j) * REL_RAW;
            if i == j {
                for c in 0..REL_RAW {
                    out[base + c] = SELF_RELATION;
                }
                continue;
            }
            let (dx, dy) = anchors[i].world_to_local(anchors[j].x, anchors[j].y);
            let dth = wrap_angle(anchors[j].theta - anchors[i].theta);
            out[base] = dx;
            out[base + 1] = dy;
            out[base + 2] = dth;
            out[base + 3] = (dx * dx + dy * dy).sqrt();
        }
    }
    out
}

/// dx, dy, dist carry their raw value plus sin/cos at F spatial
/// frequencies; the heading difference is encoded with integer-harmonic
/// sin/cos only, which is periodic and therefore immune to the +-pi wrap
/// representation of opposing headings.
pub fn rel_input_dim(f: usize) -> usize {
    3 * (1 + 2 * f) + 2 * f
}

pub fn register_relation_encoder(store: &mut ParamStore, mc: &ModelConfig) {
    Mlp::register(store, "rel", rel_input_dim(mc.fourier_freqs), mc.d, mc.d);
}

/// Encode pairwise relations into an (E, E, D) table.
pub fn relation_encode(
    g: &Graph,
    bind: &Binding,
    mc: &ModelConfig,
    anchors: &[Pose],
) -> Tensor {
    let e = anchors.len();
    let raw = relation_raw(anchors);
    let freqs = fourier_frequencies(mc.fourier_freqs);
    let din = rel_input_dim(mc.fourier_freqs);
    let mut feats = vec![0.0; e * e * din];
    for p in 0..e * e {
        let base_in = p * REL_RAW;
        let mut o = p * din;
        // Spatial channels: dx, dy, dist (raw indices 0, 1, 3).
        for c in [0usize, 1, 3] {
            let r = raw[base_in + c];
            feats[o] = r;
            o += 1;
            for &f in &freqs {
                let phase = std::f64::consts::TAU * f * r;
                feats[o] = phase.sin();
                feats[o + 1] = phase.cos();
                o += 2;
            }
        }
        // Heading channel: integer harmonics of the wrapped difference.
        let dth = raw[base_in + 2];
        for k in 1..=mc.fourier_freqs {
            feats[o] = (k as f64 * dth).sin();
            feats[o + 1] = (k as f64 * dth).cos();
            o += 2;
        }
    }
    let x = g.constant(feats, &[e * e, din]);
    let mlp = Mlp::bind(bind, "rel");
    mlp.forward(&x).reshape(&[e, e, mc.d])
}

// ── scene encoder ────────────────────────────────────────────────────

pub fn register_encoder(store: &mut ParamStore, mc: &ModelConfig) {
    let d = mc.d;
    register_mixer(
        store,
        &MixerCfg {
            name: "agent_mixer".into(),
            tokens: mc.history,
            feat_in: AGENT_FEATS,
        },
        mc,
    );
    register_mixer(
        store,
        &MixerCfg {
            name: "map_mixer".into(),
            tokens: mc.waypoints,
            feat_in: MAP_FEATS,
        },
        mc,
    );
    register_mixer(
        store,
        &MixerCfg {
            name: "route_mixer".into(),
            tokens: mc.waypoints,
            feat_in: MAP_FEATS,
        },
        mc,
    );
    store.register("type_embed", &[2, d], Init::Normal(0.02), false);
    store.register("light_embed", &[4, d], Init::Normal(0.02), false);
    register_relation_encoder(store, mc);
    for i in 0..mc.encoder_layers {
        let b = format!("enc{i}");
        Norm::register(store, &format!("{b}.norm1"), d);
        AttnParams::register(store, &format!("{b}.attn"), d);
        Norm::register(store, &format!("{b}.norm2"), d);
        Mlp::register(store, &format!("{b}.ffn"), d, mc.ffn_mult * d, d);
    }
    Norm::register(store, "enc_final_norm", d);
    Linear::register(store, "ego_route_cat", 2 * d, d);
    Mlp::register(
        store,
        "aux_head",
        d,
        mc.ffn_mult * d,
        mc.modalities * mc.horizon * 3,
    );
}

/// Everything downstream consumers need from one encoded scene.
pub struct EncodedScene {
    /// Refined per-entity features, (E_s, D).
    pub scene_feats: Tensor,
    /// Agent rows of `scene_feats`, (N, D).
    pub agent_feats: Tensor,
    /// Full relation table over agents, map, lights, routes: (E, E, D).
    pub relations: Tensor,
    /// Route polyline tokens, (N_r, D); empty tensor when no routes.
    pub route_tokens: Option<Tensor>,
    pub scene_valid: Vec<bool>,
}

pub fn encode_scene(
    g: &Graph,
    bind: &Binding,
    mc: &ModelConfig,
    ctx: &SceneContext,
) -> EncodedScene {
    let n = ctx.n_agents;
    assert!(
        ctx.agent_valid.iter().any(|&v| v),
        "scene must contain at least one valid agent"
    );
    assert_eq!(ctx.history, mc.history, "history length config mismatch");
    let d = mc.d;

    // Modality encoders.
    let agent_in = g.constant(
        ctx.agent_feats.clone(),
        &[n, ctx.history, AGENT_FEATS],
    );
    let agent_cfg = MixerCfg {
        name: "agent_mixer".into(),
        tokens: mc.history,
        feat_in: AGENT_FEATS,
    };
    let mut agent_tokens = mixer_forward(bind, &agent_cfg, mc, &agent_in);
    let type_rows = bind.get("type_embed").index_select(&ctx.agent_types);
    agent_tokens = agent_tokens.add(&type_rows);

    let mut parts: Vec<Tensor> = vec![agent_tokens];
    if ctx.n_map > 0 {
        let map_in = g.constant(
            ctx.map_feats.clone(),
            &[ctx.n_map, ctx.waypoints, MAP_FEATS],
        );
        let map_cfg = MixerCfg {
            name: "map_mixer".into(),
            tokens: mc.waypoints,
            feat_in: MAP_FEATS,
        };
        parts.push(mixer_forward(bind, &map_cfg, mc, &map_in));
    }
    if ctx.n_lights > 0 {
        parts.push(bind.get("light_embed").index_select(&ctx.light_phases));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let tokens = g.concat(&refs, 0); // (E_s, D)
    let e_s = ctx.n_scene();

    let relations = relation_encode(g, bind, mc, &ctx.anchors);
    let rel_scene = relations.narrow(0, 0, e_s).narrow(1, 0, e_s);
    let scene_valid = ctx.scene_valid();

    let mut x = tokens.reshape(&[1, e_s, d]);
    for i in 0..mc.encoder_layers {
        let b = format!("enc{i}");
        let n1 = Norm::bind(bind, &format!("{b}.norm1"));
        let attn = AttnParams::bind(bind, &format!("{b}.attn"), mc.heads);
        let n2 = Norm::bind(bind, &format!("{b}.norm2"));
        let ffn = Mlp::bind(bind, &format!("{b}.ffn"));
        let xn = n1.forward(&x);
        let a = attention_pairwise(&xn, &xn, &rel_scene, Some(&scene_valid), &attn);
        x = x.add(&a);
        let f = ffn.forward(&n2.forward(&x));
        x = x.add(&f);
    }
    let final_norm = Norm::bind(bind, "enc_final_norm");
    let mut scene_feats = final_norm.forward(&x).reshape(&[e_s, d]);

    // Route tokens; the ego row carries a concatenated route summary.
    let route_tokens = if ctx.n_routes > 0 {
        let route_in = g.constant(
            ctx.route_feats.clone(),
            &[ctx.n_routes, ctx.waypoints, MAP_FEATS],
        );
        let route_cfg = MixerCfg {
            name: "route_mixer".into(),
            tokens: mc.waypoints,
            feat_in: MAP_FEATS,
        };
        let tokens = mixer_forward(bind, &route_cfg, mc, &route_in); // (N_r, D)
        let pooled = tokens.max_axis(0).reshape(&[1, d]);
        let ego_row = scene_feats.narrow(0, ctx.ego, 1);
        let cat = g.concat(&[&ego_row, &pooled], 1); // (1, 2D)
        let fused = Linear::bind(bind, "ego_route_cat").forward(&cat);
        scene_feats = splice_rows(g, &scene_feats, ctx.ego, &fused);
        Some(tokens)
    } else {
        None
    };

    let agent_feats = scene_feats.narrow(0, 0, n);
    EncodedScene {
        scene_feats,
        agent_feats,
        relations,
        route_tokens,
        scene_valid,
    }
}

/// Multi-modal (x, y, theta) futures decoded from agent features only:
/// (N, M, T, 3).
pub fn aux_predict(bind: &Binding, mc: &ModelConfig, enc: &EncodedScene) -> Tensor {
    let n = enc.agent_feats.shape()[0];
    let head = Mlp::bind(bind, "aux_head");
    head.forward(&enc.agent_feats)
        .reshape(&[n, mc.modalities, mc.horizon, 3])
}
