//! Rollout trace files: append-only text records of generated and
//! executed trajectories, consumed by evaluation and plotting without
//! the model runtime.
//!
//! Layout: `#`-prefixed header lines (key=value), one CSV schema line,
//! then one record per line:
//!
//! ```text
//! kind,scenario,episode,replan,sample,agent,t,x,y,theta,vx,vy
//! ```
//!
//! `pred` records are open-loop samples, `plan` records hold each
//! replan's full horizon, `exec` records the executed closed-loop steps.

use crate::error::{MdgError, Result};
use crate::infer::{EpisodeResult, GenerationResult, PlanRecord};
use crate::kinematics::StateTensor;
use crate::metrics::{AgentTraj, EvalBatch, ScenarioEval};
use crate::synthworld::Scenario;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const SCHEMA: &str = "kind,scenario,episode,replan,sample,agent,t,x,y,theta,vx,vy";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Pred,
    Plan,
    Exec,
}

impl RecordKind {
    fn tag(&self) -> &'static str {
        match self {
            RecordKind::Pred => "pred",
            RecordKind::Plan => "plan",
            RecordKind::Exec => "exec",
        }
    }

    fn from_tag(s: &str) -> Result<RecordKind> {
        Ok(match s {
            "pred" => RecordKind::Pred,
            "plan" => RecordKind::Plan,
            "exec" => RecordKind::Exec,
            _ => return Err(MdgError::data(format!("unknown trace record kind {s}"))),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub kind: RecordKind,
    pub scenario: u64,
    pub episode: u32,
    pub replan: u32,
    pub sample: u32,
    pub agent: u32,
    pub t: u32,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TraceFile {
    pub header: BTreeMap<String, String>,
    pub records: Vec<TraceRecord>,
}

impl TraceFile {
    pub fn new(header: BTreeMap<String, String>) -> TraceFile {
        TraceFile {
            header,
            records: Vec::new(),
        }
    }

    /// Append every step of a generation result as `pred` records.
    pub fn push_generation(&mut self, scenario: u64, result: &GenerationResult) {
        for (sample, s) in result.samples.iter().enumerate() {
            self.push_states(
                RecordKind::Pred,
                scenario,
                0,
                0,
                sample as u32,
                &s.states,
            );
        }
    }

    /// Append one closed-loop episode: full plans plus executed steps.
    pub fn push_episode(&mut self, scenario: u64, episode: u32, result: &EpisodeResult) {
        for (k, plan) in result.plans.iter().enumerate() {
            self.push_states(RecordKind::Plan, scenario, episode, k as u32, 0, &plan.states);
        }
        self.push_states(RecordKind::Exec, scenario, episode, 0, 0, &result.executed);
    }

    fn push_states(
        &mut self,
        kind: RecordKind,
        scenario: u64,
        episode: u32,
        replan: u32,
        sample: u32,
        states: &StateTensor,
    ) {
        for a in 0..states.n_agents {
            for t in 0..states.steps {
                self.records.push(TraceRecord {
                    kind,
                    scenario,
                    episode,
                    replan,
                    sample,
                    agent: a as u32,
                    t: t as u32,
                    x: states.get(a, t, 0),
                    y: states.get(a, t, 1),
                    theta: states.get(a, t, 2),
                    vx: states.get(a, t, 3),
                    vy: states.get(a, t, 4),
                });
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# mdg-trace v1\n");
        for (k, v) in &self.header {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str(SCHEMA);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
                r.kind.tag(),
                r.scenario,
                r.episode,
                r.replan,
                r.sample,
                r.agent,
                r.t,
                r.x,
                r.y,
                r.theta,
                r.vx,
                r.vy
            );
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TraceFile> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<TraceFile> {
        let mut header = BTreeMap::new();
        let mut records = Vec::new();
        let mut saw_schema = false;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if !saw_schema {
                if line != SCHEMA {
                    return Err(MdgError::data(format!(
                        "unexpected trace schema at line {}: {line}",
                        ln + 1
                    )));
                }
                saw_schema = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 12 {
                return Err(MdgError::data(format!(
                    "trace line {} has {} fields, expected 12",
                    ln + 1,
                    fields.len()
                )));
            }
            let pu32 = |s: &str| -> Result<u32> {
                s.parse()
                    .map_err(|_| MdgError::data(format!("bad integer {s} at line {}", ln + 1)))
            };
            let pf = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| MdgError::data(format!("bad float {s} at line {}", ln + 1)))
            };
            records.push(TraceRecord {
                kind: RecordKind::from_tag(fields[0])?,
                scenario: fields[1]
                    .parse()
                    .map_err(|_| MdgError::data("bad scenario id"))?,
                episode: pu32(fields[2])?,
                replan: pu32(fields[3])?,
                sample: pu32(fields[4])?,
                agent: pu32(fields[5])?,
                t: pu32(fields[6])?,
                x: pf(fields[7])?,
                y: pf(fields[8])?,
                theta: pf(fields[9])?,
                vx: pf(fields[10])?,
                vy: pf(fields[11])?,
            });
        }
        if !saw_schema {
            return Err(MdgError::data("trace has no schema line"));
        }
        Ok(TraceFile { header, records })
    }
}

/// Goals file: `scenario,agent,x,y` per line (header optional).
pub type GoalTable = BTreeMap<u64, Vec<(usize, (f64, f64))>>;

pub fn parse_goals(text: &str) -> Result<GoalTable> {
    let mut out: GoalTable = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("scenario") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(MdgError::data(format!(
                "goals line {} needs scenario,agent,x,y",
                ln + 1
            )));
        }
        let sid: u64 = f[0].parse().map_err(|_| MdgError::data("bad scenario id"))?;
        let agent: usize = f[1].parse().map_err(|_| MdgError::data("bad agent id"))?;
        let x: f64 = f[2].parse().map_err(|_| MdgError::data("bad goal x"))?;
        let y: f64 = f[3].parse().map_err(|_| MdgError::data("bad goal y"))?;
        out.entry(sid).or_default().push((agent, (x, y)));
    }
    Ok(out)
}

pub fn goals_to_text(goals: &GoalTable) -> String {
    let mut s = String::from("scenario,agent,x,y\n");
    for (sid, list) in goals {
        for (agent, (x, y)) in list {
            let _ = writeln!(s, "{sid},{agent},{x:e},{y:e}");
        }
    }
    s
}

/// Group a trace's `pred` records into an evaluation batch against the
/// ground truth scenarios.
pub fn eval_batch_from_trace(
    trace: &TraceFile,
    dataset: &[Scenario],
    goals: Option<&GoalTable>,
) -> Result<EvalBatch> {
    let by_id: BTreeMap<u64, &Scenario> = dataset.iter().map(|s| (s.id, s)).collect();
    // scenario -> sample -> agent -> Vec<(t, pose)>
    let mut grouped: BTreeMap<u64, BTreeMap<u32, BTreeMap<u32, Vec<TraceRecord>>>> =
        BTreeMap::new();
    for r in &trace.records {
        if r.kind != RecordKind::Pred {
            continue;
        }
        grouped
            .entry(r.scenario)
            .or_default()
            .entry(r.sample)
            .or_default()
            .entry(r.agent)
            .or_default()
            .push(*r);
    }
    if grouped.is_empty() {
        return Err(MdgError::data("trace has no pred records"));
    }
    let mut batch = EvalBatch::default();
    for (sid, samples) in grouped {
        let sc = by_id.get(&sid).ok_or_else(|| {
            MdgError::data(format!("trace references scenario {sid} missing from dataset"))
        })?;
        let t_expect = sc.horizon();
        let mut sample_trajs = Vec::new();
        for (_sample, agents) in samples {
            let mut trajs = vec![
                AgentTraj { poses: Vec::new() };
                sc.n_agents()
            ];
            if agents.len() != sc.n_agents() {
                return Err(MdgError::data(format!(
                    "scenario {sid}: trace sample covers {} agents, dataset has {}",
                    agents.len(),
                    sc.n_agents()
                )));
            }
            for (agent, mut recs) in agents {
                recs.sort_by_key(|r| r.t);
                if recs.len() != t_expect {
                    return Err(MdgError::data(format!(
                        "scenario {sid} agent {agent}: {} steps in trace, expected {t_expect}",
                        recs.len()
                    )));
                }
                trajs[agent as usize] = AgentTraj {
                    poses: recs.iter().map(|r| (r.x, r.y, r.theta)).collect(),
                };
            }
            sample_trajs.push(trajs);
        }
        let goal_vec: Vec<Option<(f64, f64)>> = match goals.and_then(|g| g.get(&sid)) {
            Some(list) => {
                let mut v = vec![None; sc.n_agents()];
                for &(agent, xy) in list {
                    if agent >= sc.n_agents() {
                        return Err(MdgError::data(format!(
                            "goal references agent {agent} beyond scenario {sid}"
                        )));
                    }
                    v[agent] = Some(xy);
                }
                v
            }
            None => vec![None; sc.n_agents()],
        };
        let mut eval = ScenarioEval::from_generation(sc, &[], goal_vec);
        eval.samples = sample_trajs;
        batch.scenarios.push(eval);
    }
    Ok(batch)
}

/// Extract per-(scenario, episode) plan sequences from a closed-loop trace.
pub fn plans_from_trace(trace: &TraceFile) -> Result<Vec<(u64, u32, Vec<PlanRecord>)>> {
    // (scenario, episode) -> replan -> records
    let mut grouped: BTreeMap<(u64, u32), BTreeMap<u32, Vec<TraceRecord>>> = BTreeMap::new();
    for r in &trace.records {
        if r.kind != RecordKind::Plan {
            continue;
        }
        grouped
            .entry((r.scenario, r.episode))
            .or_default()
            .entry(r.replan)
            .or_default()
            .push(*r);
    }
    let replan_period: usize = trace
        .header
        .get("replan_period")
        .and_then(|v| v.parse().ok())
        .unwrap_or(10);
    let mut out = Vec::new();
    for ((sid, ep), by_replan) in grouped {
        let mut plans = Vec::new();
        for (replan, recs) in by_replan {
            let n = recs.iter().map(|r| r.agent).max().unwrap() as usize + 1;
            let t = recs.iter().map(|r| r.t).max().unwrap() as usize + 1;
            let mut st = StateTensor::zeros(n, t);
            for r in &recs {
                let (a, s) = (r.agent as usize, r.t as usize);
                st.set(a, s, 0, r.x);
                st.set(a, s, 1, r.y);
                st.set(a, s, 2, r.theta);
                st.set(a, s, 3, r.vx);
                st.set(a, s, 4, r.vy);
            }
            plans.push(PlanRecord {
                at_step: replan as usize * replan_period,
                states: st,
            });
        }
        out.push((sid, ep, plans));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> TraceFile {
        let mut header = BTreeMap::new();
        header.insert("seed".to_string(), "7".to_string());
        header.insert("mode".to_string(), "one_step".to_string());
        let mut tf = TraceFile::new(header);
        let mut st = StateTensor::zeros(2, 3);
        for a in 0..2 {
            for t in 0..3 {
                st.set(a, t, 0, a as f64 + t as f64 * 0.1);
                st.set(a, t, 1, -1.5);
                st.set(a, t, 2, 0.25);
                st.set(a, t, 3, 5.0);
                st.set(a, t, 4, 0.0);
            }
        }
        tf.push_states(RecordKind::Pred, 3, 0, 0, 0, &st);
        tf
    }

    #[test]
    fn roundtrip_preserves_header_and_records() {
        let tf = sample_trace();
        let text = tf.to_text();
        let back = TraceFile::parse(&text).unwrap();
        assert_eq!(back.header["seed"], "7");
        assert_eq!(back.records.len(), tf.records.len());
        for (a, b) in tf.records.iter().zip(&back.records) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.scenario, b.scenario);
            assert_eq!(a.x.to_bits(), b.x.to_bits(), "floats must round-trip");
            assert_eq!(a.theta.to_bits(), b.theta.to_bits());
        }
    }

    #[test]
    fn text_output_is_deterministic() {
        assert_eq!(sample_trace().to_text(), sample_trace().to_text());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(TraceFile::parse("pred,1,2\n").is_err());
        let bad_kind = format!("{SCHEMA}\nwat,0,0,0,0,0,0,0,0,0,0,0\n");
        assert!(TraceFile::parse(&bad_kind).is_err());
    }

    #[test]
    fn goals_roundtrip() {
        let mut goals: GoalTable = BTreeMap::new();
        goals.entry(4).or_default().push((2, (10.5, -3.25)));
        goals.entry(7).or_default().push((0, (0.0, 1.0)));
        let text = goals_to_text(&goals);
        let back = parse_goals(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[&4][0].0, 2);
        assert!((back[&4][0].1 .0 - 10.5).abs() < 1e-12);
    }
}
