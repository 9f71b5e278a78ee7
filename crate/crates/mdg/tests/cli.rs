//! CLI behavior: exit codes, warnings, provenance, schedule goldens, and
//! evaluation plumbing end to end.

use mdg::noisefield::{build_schedule, ScheduleMode};
use mdg::synthworld::load_dataset;
use mdg::trace::{RecordKind, TraceFile};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mdg")
}

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mdg_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &PathBuf, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("failed to spawn mdg")
}

#[test]
fn invalid_map_kind_is_usage_error() {
    let dir = workdir("badkind");
    let out = run_in(
        &dir,
        &["gen-data", "--kinds", "mars", "--count", "1", "--out", "d.bin"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("straight") && err.contains("merge"), "{err}");
}

#[test]
fn empty_dataset_warns_but_succeeds() {
    let dir = workdir("empty");
    let out = run_in(
        &dir,
        &["gen-data", "--count", "0", "--seed", "1", "--out", "d.bin"],
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("warning"), "{stdout}");
    let ds = load_dataset(&dir.join("d.bin")).unwrap();
    assert!(ds.scenarios.is_empty());
}

#[test]
fn schedule_command_matches_golden_byte_for_byte() {
    let dir = workdir("sched");
    let out = run_in(
        &dir,
        &[
            "schedule", "--mode", "temporal", "--steps", "5", "--agents", "2", "--tokens", "40",
        ],
    );
    assert!(out.status.success());
    let golden = std::fs::read("tests/golden/schedule_temporal_5.txt").unwrap();
    assert_eq!(out.stdout, golden);
}

#[test]
fn eval_on_ground_truth_trace_gives_zero_sade_and_cr() {
    let dir = workdir("gteval");
    let out = run_in(
        &dir,
        &["gen-data", "--count", "4", "--agents", "5", "--seed", "3", "--out", "d.bin"],
    );
    assert!(out.status.success());
    let ds = load_dataset(&dir.join("d.bin")).unwrap();
    // Build a trace whose predictions are exactly the ground truth.
    let mut header = BTreeMap::new();
    header.insert(
        "dataset_sha".to_string(),
        mdg::config::file_digest(&dir.join("d.bin")).unwrap(),
    );
    let mut tf = TraceFile::new(header);
    for sc in &ds.scenarios {
        let gt = sc.gt_states();
        let fake = mdg::infer::GenerationResult {
            samples: vec![mdg::infer::GenerationSample {
                actions: mdg::kinematics::ActionTensor::zeros(sc.n_agents(), 1),
                states: gt,
                trace: vec![],
            }],
            denoiser_calls: 0,
        };
        tf.push_generation(sc.id, &fake);
    }
    tf.save(&dir.join("trace.csv")).unwrap();
    let out = run_in(
        &dir,
        &["eval", "--trace", "trace.csv", "--data", "d.bin", "--out", "report"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.join("report/report.csv")).unwrap();
    let value_of = |metric: &str| -> f64 {
        csv.lines()
            .find(|l| l.starts_with(&format!("{metric},")))
            .unwrap_or_else(|| panic!("{metric} missing from {csv}"))
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(value_of("sade"), 0.0);
    assert_eq!(value_of("minsade"), 0.0);
    assert_eq!(value_of("cr"), 0.0, "ground truth is collision-free");
}

#[test]
fn eval_rejects_mismatched_dataset() {
    let dir = workdir("mismatch");
    for (seed, name) in [("3", "d1.bin"), ("4", "d2.bin")] {
        let out = run_in(
            &dir,
            &["gen-data", "--count", "2", "--agents", "4", "--seed", seed, "--out", name],
        );
        assert!(out.status.success());
    }
    let ds = load_dataset(&dir.join("d1.bin")).unwrap();
    let mut header = BTreeMap::new();
    header.insert(
        "dataset_sha".to_string(),
        mdg::config::file_digest(&dir.join("d1.bin")).unwrap(),
    );
    let mut tf = TraceFile::new(header);
    let sc = &ds.scenarios[0];
    tf.push_generation(
        sc.id,
        &mdg::infer::GenerationResult {
            samples: vec![mdg::infer::GenerationSample {
                actions: mdg::kinematics::ActionTensor::zeros(sc.n_agents(), 1),
                states: sc.gt_states(),
                trace: vec![],
            }],
            denoiser_calls: 0,
        },
    );
    tf.save(&dir.join("trace.csv")).unwrap();
    let out = run_in(
        &dir,
        &["eval", "--trace", "trace.csv", "--data", "d2.bin"],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset"), "{err}");
}

#[test]
fn generate_writes_schedule_dump_and_provenance() {
    let dir = workdir("genprov");
    let out = run_in(
        &dir,
        &["gen-data", "--count", "3", "--agents", "4", "--seed", "6", "--out", "d.bin"],
    );
    assert!(out.status.success());
    std::fs::write(
        dir.join("cfg.txt"),
        "model.d=16\nmodel.encoder_layers=1\nmodel.mixer_layers=1\nmodel.ffn_mult=2\ntrain.epochs=1\ntrain.batch_size=4\ntrain.warmup_steps=2\n",
    )
    .unwrap();
    let out = run_in(
        &dir,
        &["train", "--data", "d.bin", "--config", "cfg.txt", "--out", "t"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_in(
        &dir,
        &[
            "generate", "--ckpt", "t/model.ckpt", "--data", "d.bin", "--mode", "temporal",
            "--steps", "5", "--samples", "1", "--seed", "2", "--scenes", "1", "--out", "g",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // The schedule dump equals the library construction for those dims.
    let ds = load_dataset(&dir.join("d.bin")).unwrap();
    let n = ds.scenarios[0].n_agents();
    let want = build_schedule(ScheduleMode::Temporal, 5, n, 20, 5).dump();
    let got = std::fs::read_to_string(dir.join("g/schedule.txt")).unwrap();
    assert_eq!(got, want);
    // Provenance and config snapshot exist and reference the inputs.
    let prov = std::fs::read_to_string(dir.join("g/provenance.txt")).unwrap();
    assert!(prov.contains("dataset_sha=") && prov.contains("ckpt_sha="));
    assert!(dir.join("g/config.txt").exists());
    // Trace is parseable and sized as requested.
    let trace = TraceFile::load(&dir.join("g/trace.csv")).unwrap();
    let preds = trace
        .records
        .iter()
        .filter(|r| r.kind == RecordKind::Pred)
        .count();
    assert_eq!(preds, n * 40);
}

#[test]
fn eval_emits_svg_overlay() {
    let dir = workdir("svg");
    let out = run_in(
        &dir,
        &["gen-data", "--count", "2", "--agents", "4", "--seed", "9", "--out", "d.bin"],
    );
    assert!(out.status.success());
    let ds = load_dataset(&dir.join("d.bin")).unwrap();
    let mut header = BTreeMap::new();
    header.insert(
        "dataset_sha".to_string(),
        mdg::config::file_digest(&dir.join("d.bin")).unwrap(),
    );
    let mut tf = TraceFile::new(header);
    for sc in &ds.scenarios {
        tf.push_generation(
            sc.id,
            &mdg::infer::GenerationResult {
                samples: vec![mdg::infer::GenerationSample {
                    actions: mdg::kinematics::ActionTensor::zeros(sc.n_agents(), 1),
                    states: sc.gt_states(),
                    trace: vec![],
                }],
                denoiser_calls: 0,
            },
        );
    }
    tf.save(&dir.join("trace.csv")).unwrap();
    let out = run_in(
        &dir,
        &["eval", "--trace", "trace.csv", "--data", "d.bin", "--svg", "plot.svg"],
    );
    assert!(out.status.success());
    let svg = std::fs::read_to_string(dir.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.ends_with("</svg>\n"));
}
