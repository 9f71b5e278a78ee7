//! Command-line harness wiring all modules into reproducible runs:
//! dataset generation, training, generation, closed-loop rollout,
//! evaluation, and schedule inspection.
//!
//! Every command with an output directory writes a resolved config
//! snapshot plus input hashes, and identical inputs with identical seeds
//! produce byte-identical outputs.

use crate::config::{file_digest, RunConfig};
use crate::error::{MdgError, Result};
use crate::infer::{generate, run_episode, ClosedLoopConfig, GenerationRequest, GuidanceSpec};
use crate::metrics::{
    collision_rate, goal_reach_rate, minsade, offroad_rate, plan_consistency, sade, EvalBatch,
    MetricReport, ScenarioEval,
};
use crate::model::Model;
use crate::noisefield::{build_schedule, ScheduleMode};
use crate::synthworld::{
    generate_dataset, load_dataset, save_dataset, GenConfig, MapKind, Scenario,
};
use crate::trace::{eval_batch_from_trace, parse_goals, plans_from_trace, GoalTable, TraceFile};
use crate::train::{train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mdg", version, about = "Masked denoising generation for multi-agent trajectories")]
pub struct Cli {
    /// Cap worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Sample trajectories from a trained model.
    Generate(GenerateArgs),
    /// Closed-loop rollout with replanning.
    Rollout(RolloutArgs),
    /// Evaluate a trace against its dataset.
    Eval(EvalArgs),
    /// Print a denoising schedule's level grid.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Comma-separated map kinds (straight,curve,intersection,merge).
    #[arg(long, default_value = "straight,curve,intersection,merge")]
    pub kinds: String,
    #[arg(long)]
    pub count: usize,
    /// Agents per scenario.
    #[arg(long, default_value_t = 8)]
    pub agents: usize,
    #[arg(long, default_value_t = 10)]
    pub history: usize,
    #[arg(long, default_value_t = 40)]
    pub horizon: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Optional key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline overrides, key=value.
    #[arg(long = "set")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// one_step | temporal | agent
    #[arg(long, default_value = "one_step")]
    pub mode: String,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Goals file (scenario,agent,x,y) enabling guidance.
    #[arg(long)]
    pub guide: Option<PathBuf>,
    /// Evaluate only the first N scenarios (0 = all).
    #[arg(long, default_value_t = 0)]
    pub scenes: usize,
    /// Skip the first N scenarios.
    #[arg(long, default_value_t = 0)]
    pub skip: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Replans per second.
    #[arg(long, default_value_t = 1.0)]
    pub replan_hz: f64,
    #[arg(long, default_value_t = false)]
    pub reuse: bool,
    #[arg(long, default_value_t = 80)]
    pub episode_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of episodes (0 = one per scenario).
    #[arg(long, default_value_t = 0)]
    pub episodes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub goals: Option<PathBuf>,
    /// Comma-separated metric list, or "all".
    #[arg(long, default_value = "all")]
    pub metrics: String,
    /// Optional output directory for report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional SVG trajectory overlay.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value = "temporal")]
    pub mode: String,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    #[arg(long, default_value_t = 2)]
    pub agents: usize,
    /// Chunked-step extent of the mask grid.
    #[arg(long, default_value_t = 20)]
    pub tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Schedule(a) => cmd_schedule(a),
    }
}

fn parse_kinds(s: &str) -> Result<Vec<MapKind>> {
    let mut kinds = Vec::new();
    for tok in s.split(',') {
        let tok = tok.trim();
        if tok.is_empty() {
            continue;
        }
        let kind = MapKind::from_tag(tok).ok_or_else(|| {
            MdgError::usage(format!(
                "invalid map kind '{tok}'; valid kinds: straight, curve, intersection, merge"
            ))
        })?;
        kinds.push(kind);
    }
    if kinds.is_empty() {
        return Err(MdgError::usage("no map kinds given"));
    }
    Ok(kinds)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_provenance(dir: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}={v}");
    }
    fs::write(dir.join("provenance.txt"), s)?;
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let kinds = parse_kinds(&a.kinds)?;
    let cfg = GenConfig {
        history: a.history,
        horizon: a.horizon,
        n_agents: a.agents,
    };
    let scenarios = generate_dataset(&kinds, a.count, &cfg, a.seed)?;
    save_dataset(&scenarios, a.seed, &a.out)?;
    if scenarios.is_empty() {
        println!("warning: wrote an empty dataset");
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sc in &scenarios {
        *counts.entry(sc.map.kind.tag()).or_default() += 1;
    }
    for (kind, count) in counts {
        println!("{kind}: {count}");
    }
    println!(
        "wrote {} scenarios to {} (sha256 {})",
        scenarios.len(),
        a.out.display(),
        file_digest(&a.out)?
    );
    Ok(())
}

fn load_run_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(sets)?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let run_cfg = load_run_config(a.config.as_deref(), &a.sets)?;
    let model_cfg = run_cfg.model_config()?;
    let train_cfg: TrainConfig = run_cfg.train_config()?;
    let dataset = load_dataset(&a.data)?;
    if dataset.scenarios.is_empty() {
        return Err(MdgError::data("training dataset is empty"));
    }
    let mut model = Model::new(model_cfg, train_cfg.seed);
    println!(
        "training {} parameters on {} scenarios for {} epochs",
        model.num_params(),
        dataset.scenarios.len(),
        train_cfg.epochs
    );
    let mut log = fs::File::create(a.out.join("train_log.csv"))?;
    use std::io::Write as _;
    writeln!(log, "step,lr,l_d,l_p,total,grad_norm")?;
    let reports = train(
        &mut model,
        &dataset.scenarios,
        &train_cfg,
        Some(&mut log),
        Some(&a.out),
    )?;
    model.save(&a.out.join("model.ckpt"))?;
    fs::write(a.out.join("config.txt"), run_cfg.snapshot())?;
    let mut prov = BTreeMap::new();
    prov.insert("config_hash".to_string(), run_cfg.content_hash());
    prov.insert("dataset_sha".to_string(), file_digest(&a.data)?);
    prov.insert("seed".to_string(), train_cfg.seed.to_string());
    write_provenance(&a.out, &prov)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!(
            "steps {}..{}: total {:.4} -> {:.4}",
            first.step, last.step, first.total, last.total
        );
    }
    println!("checkpoint: {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn schedule_mode(s: &str) -> Result<ScheduleMode> {
    ScheduleMode::from_tag(s)
        .filter(|m| *m != ScheduleMode::Custom)
        .ok_or_else(|| {
            MdgError::usage(format!(
                "invalid mode '{s}'; valid modes: one_step, temporal, agent"
            ))
        })
}

fn select_scenarios(scenarios: &[Scenario], skip: usize, scenes: usize) -> &[Scenario] {
    let start = skip.min(scenarios.len());
    let end = if scenes == 0 {
        scenarios.len()
    } else {
        (start + scenes).min(scenarios.len())
    };
    &scenarios[start..end]
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let model = Model::load(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let mode = schedule_mode(&a.mode)?;
    let goals: Option<GoalTable> = match &a.guide {
        Some(p) => Some(parse_goals(&fs::read_to_string(p)?)?),
        None => None,
    };
    let scenarios = select_scenarios(&dataset.scenarios, a.skip, a.scenes);
    if scenarios.is_empty() {
        return Err(MdgError::data("no scenarios selected"));
    }
    let steps = if mode == ScheduleMode::OneStep { 1 } else { a.steps };

    let mut run_cfg = RunConfig::default();
    run_cfg.set("infer.mode", mode.tag());
    run_cfg.set("infer.steps", &steps.to_string());
    run_cfg.set("infer.samples", &a.samples.to_string());
    run_cfg.set("infer.seed", &a.seed.to_string());

    let mut header = BTreeMap::new();
    header.insert("mode".to_string(), mode.tag().to_string());
    header.insert("steps".to_string(), steps.to_string());
    header.insert("samples".to_string(), a.samples.to_string());
    header.insert("seed".to_string(), a.seed.to_string());
    header.insert("config_hash".to_string(), run_cfg.content_hash());
    header.insert("dataset_sha".to_string(), file_digest(&a.data)?);
    header.insert("ckpt_sha".to_string(), file_digest(&a.ckpt)?);
    header.insert("guided".to_string(), goals.is_some().to_string());
    let mut trace_file = TraceFile::new(header);

    let mut schedule_dump = None;
    let mut total_calls = 0usize;
    for sc in scenarios {
        let schedule = build_schedule(mode, steps, sc.n_agents(), model.cfg.t_a(), model.cfg.k_levels);
        if schedule_dump.is_none() {
            schedule_dump = Some(schedule.dump());
        }
        let guidance = goals.as_ref().and_then(|g| g.get(&sc.id)).map(|targets| GuidanceSpec {
            targets: targets.clone(),
        });
        let req = GenerationRequest {
            scenario: sc,
            schedule: &schedule,
            num_samples: a.samples,
            seed: crate::rng::StreamKey::root(a.seed).child(sc.id).stream().next_u64(),
            guidance,
        };
        let out = generate(&model, &req)?;
        total_calls += out.denoiser_calls;
        trace_file.push_generation(sc.id, &out);
    }
    trace_file.save(&a.out.join("trace.csv"))?;
    if let Some(dump) = schedule_dump {
        fs::write(a.out.join("schedule.txt"), dump)?;
    }
    fs::write(a.out.join("config.txt"), run_cfg.snapshot())?;
    let mut prov = BTreeMap::new();
    prov.insert("config_hash".to_string(), run_cfg.content_hash());
    prov.insert("dataset_sha".to_string(), file_digest(&a.data)?);
    prov.insert("ckpt_sha".to_string(), file_digest(&a.ckpt)?);
    prov.insert("seed".to_string(), a.seed.to_string());
    write_provenance(&a.out, &prov)?;
    println!(
        "generated {} samples x {} scenarios ({} denoiser calls) -> {}",
        a.samples,
        scenarios.len(),
        total_calls,
        a.out.join("trace.csv").display()
    );
    Ok(())
}

fn cmd_rollout(a: RolloutArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    let model = Model::load(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    if a.replan_hz <= 0.0 {
        return Err(MdgError::usage("replan rate must be positive"));
    }
    let replan_period = (1.0 / (a.replan_hz * crate::kinematics::DT)).round() as usize;
    let n_eps = if a.episodes == 0 {
        dataset.scenarios.len()
    } else {
        a.episodes.min(dataset.scenarios.len())
    };
    let mut run_cfg = RunConfig::default();
    run_cfg.set("infer.reuse", &a.reuse.to_string());
    run_cfg.set("infer.replan_period", &replan_period.to_string());
    run_cfg.set("infer.episode_steps", &a.episode_steps.to_string());
    run_cfg.set("infer.seed", &a.seed.to_string());

    let mut header = BTreeMap::new();
    header.insert(
        "mode".to_string(),
        if a.reuse {
            "closed_loop_reuse".to_string()
        } else {
            "closed_loop".to_string()
        },
    );
    header.insert("seed".to_string(), a.seed.to_string());
    header.insert("replan_period".to_string(), replan_period.to_string());
    header.insert("config_hash".to_string(), run_cfg.content_hash());
    header.insert("dataset_sha".to_string(), file_digest(&a.data)?);
    header.insert("ckpt_sha".to_string(), file_digest(&a.ckpt)?);
    let mut trace_file = TraceFile::new(header);
    let mut calls = 0usize;
    for (ep, sc) in dataset.scenarios[..n_eps].iter().enumerate() {
        let cfg = ClosedLoopConfig {
            episode_steps: a.episode_steps,
            replan_period,
            reuse: a.reuse,
            seed: crate::rng::StreamKey::root(a.seed).child(sc.id).stream().next_u64(),
        };
        let result = run_episode(&model, sc, &cfg)?;
        calls += result.denoiser_calls;
        trace_file.push_episode(sc.id, ep as u32, &result);
    }
    trace_file.save(&a.out.join("trace.csv"))?;
    fs::write(a.out.join("config.txt"), run_cfg.snapshot())?;
    let mut prov = BTreeMap::new();
    prov.insert("config_hash".to_string(), run_cfg.content_hash());
    prov.insert("dataset_sha".to_string(), file_digest(&a.data)?);
    prov.insert("ckpt_sha".to_string(), file_digest(&a.ckpt)?);
    prov.insert("seed".to_string(), a.seed.to_string());
    write_provenance(&a.out, &prov)?;
    println!(
        "rolled out {n_eps} episodes ({calls} denoiser calls) -> {}",
        a.out.join("trace.csv").display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let trace = TraceFile::load(&a.trace)?;
    let dataset = load_dataset(&a.data)?;
    if let Some(sha) = trace.header.get("dataset_sha") {
        let actual = file_digest(&a.data)?;
        if sha != &actual {
            return Err(MdgError::data(format!(
                "trace was produced from dataset {sha}, given {actual}"
            )));
        }
    }
    let goals: Option<GoalTable> = match &a.goals {
        Some(p) => Some(parse_goals(&fs::read_to_string(p)?)?),
        None => None,
    };
    let want = |name: &str| a.metrics == "all" || a.metrics.split(',').any(|m| m.trim() == name);

    let mut report = MetricReport::default();
    let has_pred = trace
        .records
        .iter()
        .any(|r| r.kind == crate::trace::RecordKind::Pred);
    if has_pred {
        let batch = eval_batch_from_trace(&trace, &dataset.scenarios, goals.as_ref())?;
        let n = batch.scenarios.len();
        if want("cr") {
            report.push("cr", collision_rate(&batch), n);
        }
        if want("or") {
            report.push("or", offroad_rate(&batch), n);
        }
        if want("sade") {
            report.push("sade", sade(&batch), n);
        }
        if want("minsade") {
            report.push("minsade", minsade(&batch), n);
        }
        if want("gr") && goals.is_some() {
            report.push("gr", goal_reach_rate(&batch), n);
        }
    }
    let plan_groups = plans_from_trace(&trace)?;
    if !plan_groups.is_empty() && want("consistency") {
        let by_id: BTreeMap<u64, &Scenario> =
            dataset.scenarios.iter().map(|s| (s.id, s)).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for (sid, _ep, plans) in &plan_groups {
            let sc = by_id.get(sid).ok_or_else(|| {
                MdgError::data(format!("trace references unknown scenario {sid}"))
            })?;
            if plans.len() >= 2 {
                total += plan_consistency(plans, sc.ego);
                count += 1;
            }
        }
        if count > 0 {
            report.push("consistency", total / count as f64, count);
        }
    }
    let exec_batch = exec_eval_batch(&trace, &dataset.scenarios)?;
    if let Some(batch) = exec_batch {
        let n = batch.scenarios.len();
        if want("cr_exec") || (a.metrics == "all" && !has_pred) {
            report.push("cr_exec", collision_rate(&batch), n);
            report.push("or_exec", offroad_rate(&batch), n);
        }
    }
    if report.rows.is_empty() {
        return Err(MdgError::data("no applicable metrics for this trace"));
    }
    print!("{}", report.to_table());
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        fs::write(dir.join("report.txt"), report.to_table())?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
    }
    if let Some(svg) = &a.svg {
        fs::write(svg, render_svg(&trace, &dataset.scenarios))?;
    }
    Ok(())
}

/// Executed closed-loop trajectories as single-sample pseudo-batches for
/// collision and off-road checks (ground truth is not time-aligned here).
fn exec_eval_batch(trace: &TraceFile, dataset: &[Scenario]) -> Result<Option<EvalBatch>> {
    use crate::metrics::AgentTraj;
    use crate::trace::RecordKind;
    let mut grouped: BTreeMap<(u64, u32), BTreeMap<u32, Vec<crate::trace::TraceRecord>>> =
        BTreeMap::new();
    for r in &trace.records {
        if r.kind == RecordKind::Exec {
            grouped
                .entry((r.scenario, r.episode))
                .or_default()
                .entry(r.agent)
                .or_default()
                .push(*r);
        }
    }
    if grouped.is_empty() {
        return Ok(None);
    }
    let by_id: BTreeMap<u64, &Scenario> = dataset.iter().map(|s| (s.id, s)).collect();
    let mut batch = EvalBatch::default();
    for ((sid, _ep), agents) in grouped {
        let sc = by_id
            .get(&sid)
            .ok_or_else(|| MdgError::data(format!("unknown scenario {sid} in trace")))?;
        let mut trajs = vec![AgentTraj { poses: Vec::new() }; sc.n_agents()];
        for (agent, mut recs) in agents {
            recs.sort_by_key(|r| r.t);
            trajs[agent as usize] = AgentTraj {
                poses: recs.iter().map(|r| (r.x, r.y, r.theta)).collect(),
            };
        }
        let mut eval = ScenarioEval::from_generation(sc, &[], vec![None; sc.n_agents()]);
        eval.gt = trajs.clone();
        eval.samples = vec![trajs];
        batch.scenarios.push(eval);
    }
    Ok(Some(batch))
}

/// Minimal vector rendering of lanes, ground truth, and trajectories.
fn render_svg(trace: &TraceFile, dataset: &[Scenario]) -> String {
    let ids: std::collections::BTreeSet<u64> = trace.records.iter().map(|r| r.scenario).collect();
    let scs: Vec<&Scenario> = dataset.iter().filter(|s| ids.contains(&s.id)).collect();
    let mut points: Vec<(f64, f64)> = Vec::new();
    for sc in &scs {
        for lane in &sc.map.lanes {
            points.extend(lane.points.iter().map(|&(x, y, _)| (x, y)));
        }
    }
    points.extend(trace.records.iter().map(|r| (r.x, r.y)));
    if points.is_empty() {
        points.push((0.0, 0.0));
        points.push((1.0, 1.0));
    }
    let min_x = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = 10.0;
    let w = max_x - min_x + 2.0 * pad;
    let h = max_y - min_y + 2.0 * pad;
    let tx = |x: f64| x - min_x + pad;
    let ty = |y: f64| max_y - y + pad; // flip for screen coordinates
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.1} {h:.1}\">\n"
    );
    for sc in &scs {
        for lane in &sc.map.lanes {
            let pts: Vec<String> = lane
                .points
                .iter()
                .map(|&(x, y, _)| format!("{:.2},{:.2}", tx(x), ty(y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"4\" stroke-linecap=\"round\"/>",
                pts.join(" ")
            );
        }
        for agent in &sc.agents {
            let pts: Vec<String> = agent
                .future
                .iter()
                .map(|p| format!("{:.2},{:.2}", tx(p.x), ty(p.y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"#3366cc\" stroke-width=\"0.6\" stroke-dasharray=\"2,1\"/>",
                pts.join(" ")
            );
        }
    }
    // One polyline per (scenario, kind, episode/sample, agent).
    let mut grouped: BTreeMap<(u64, u8, u32, u32, u32), Vec<(u32, f64, f64)>> = BTreeMap::new();
    for r in &trace.records {
        let kind_id = match r.kind {
            crate::trace::RecordKind::Pred => 0u8,
            crate::trace::RecordKind::Plan => 1,
            crate::trace::RecordKind::Exec => 2,
        };
        grouped
            .entry((r.scenario, kind_id, r.episode.max(r.sample), r.replan, r.agent))
            .or_default()
            .push((r.t, r.x, r.y));
    }
    for ((_, kind_id, _, _, _), mut pts) in grouped {
        pts.sort_by_key(|p| p.0);
        let color = match kind_id {
            0 => "#cc3333",
            1 => "#dd9933",
            _ => "#228833",
        };
        let path: Vec<String> = pts
            .iter()
            .map(|&(_, x, y)| format!("{:.2},{:.2}", tx(x), ty(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.5\"/>",
            path.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_schedule(a: ScheduleArgs) -> Result<()> {
    let mode = schedule_mode(&a.mode)?;
    if a.steps < 1 {
        return Err(MdgError::usage("steps must be at least 1"));
    }
    let steps = if mode == ScheduleMode::OneStep { 1 } else { a.steps };
    let schedule = build_schedule(mode, steps, a.agents, a.tokens, a.k);
    print!("{}", schedule.dump());
    Ok(())
}
