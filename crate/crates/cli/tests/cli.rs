use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use talift_cli::{dispatch, EXIT_BACKEND, EXIT_FAILED, EXIT_OK, EXIT_USAGE};
use talift_core::eval::Ablation;
use talift_core::isa::{parse_program, render_program};
use talift_core::kernels::{fixture, generate_testcases, verify_text};
use talift_core::prompt::build_translation_prompt;
use talift_core::sim::MachineConfig;
use talift_sched::SessionRecord;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn path(rel: &str) -> String {
    fixtures().join(rel).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("talift").chain(args.iter().copied()))
}

fn out_dir() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().to_string_lossy().into_owned();
    (dir, s)
}

#[test]
fn verify_exit_codes() {
    assert_eq!(run(&["verify", "--program", &path("programs/golden_gv1.txt"), "--kernel", "gv1"]), EXIT_OK);
    assert_eq!(run(&["verify", "--program", &path("programs/broken_gm3.txt"), "--kernel", "gm3"]), EXIT_FAILED);
    assert_eq!(run(&["verify", "--program", &path("programs/golden_gv1.txt"), "--kernel", "gv9"]), EXIT_USAGE);
    assert_eq!(run(&["verify", "--program", "/nonexistent", "--kernel", "gv1"]), EXIT_USAGE);
    assert_eq!(run(&["--jobs", "1", "verify", "--program", &path("programs/golden_gm7.txt"), "--kernel", "gm7", "--n", "3"]), EXIT_OK);
}

#[test]
fn usage_errors() {
    assert_eq!(run(&["verify", "--bogus"]), EXIT_USAGE);
    assert_eq!(run(&[]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
    let conf = path("experiment.toml");
    assert_eq!(run(&["evaluate", "--config", &conf]), EXIT_USAGE);
    assert_eq!(run(&["evaluate", "--config", &conf, "--backend", "replay"]), EXIT_USAGE);
    assert_eq!(run(&["evaluate", "--config", &conf, "--fixtures", &path("replay")]), EXIT_USAGE);

    let output = Command::new(env!("CARGO_BIN_EXE_talift")).args(["verify", "--bogus"]).output().unwrap();
    assert_eq!(output.status.code(), Some(EXIT_USAGE));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("Usage: talift verify"), "{stderr}");
}

#[test]
fn replay_miss_names_the_fingerprint() {
    let empty = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_talift"))
        .args(["evaluate", "--config", &path("experiment.toml"), "--backend", "replay", "--fixtures"])
        .arg(empty.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(EXIT_BACKEND));
    // gv1 is skipped as the in-context example, so gv2 is requested first
    let spec = Ablation::new("one-shot").prompt_spec(&fixture("gv2").unwrap().spec);
    let fingerprint = build_translation_prompt(&spec).unwrap().fingerprint;
    assert!(String::from_utf8_lossy(&output.stderr).contains(&fingerprint));
}

#[test]
fn evaluate_writes_stable_files() {
    let (_a, a) = out_dir();
    let (_b, b) = out_dir();
    for out in [&a, &b] {
        let code = run(&["--out", out, "evaluate", "--config", &path("experiment.toml"), "--backend", "replay", "--fixtures", &path("replay")]);
        assert_eq!(code, EXIT_OK);
    }
    let csv = fs::read_to_string(Path::new(&a).join("report.csv")).unwrap();
    assert_eq!(
        csv,
        "config,n,c,pass@1,pass@5,pass@10,excluded\none-shot,40,20,50.00%,97.64%,99.98%,gv1\nNo-ISA,40,20,50.00%,97.64%,99.98%,gv1\n"
    );
    assert!(Path::new(&a).join("candidates/No-ISA/gm4/009.json").is_file());
    let list = |root: &str| {
        let mut v = Vec::new();
        let mut stack = vec![PathBuf::from(root)];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    v.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        v.sort();
        v
    };
    assert_eq!(list(&a), list(&b));
    // a smaller --n replays a prefix of the recorded samples
    assert_eq!(
        run(&["evaluate", "--config", &path("experiment.toml"), "--backend", "replay", "--fixtures", &path("replay"), "--n", "4", "--k", "1,4"]),
        EXIT_OK
    );
}

#[test]
fn repair_paths() {
    let (_d, out) = out_dir();
    let code = run(&[
        "--out", &out, "repair", "--candidate", &path("programs/broken_gm3.txt"), "--kernel", "gm3",
        "--constants", "0,1,3,4,12", "--mode", "enumerate", "--backend", "replay", "--fixtures", &path("replay"),
    ]);
    assert_eq!(code, EXIT_OK);
    let repaired = fs::read_to_string(Path::new(&out).join("repaired.txt")).unwrap();
    let spec = &fixture("gm3").unwrap().spec;
    let cfg = MachineConfig::default();
    assert!(verify_text(&repaired, spec, &generate_testcases(spec, 99, 10, cfg.dim), cfg, false).passed);

    assert_eq!(run(&["repair", "--program", &path("programs/marked_gm3.txt"), "--kernel", "gm3"]), EXIT_OK);
    assert_eq!(run(&["repair", "--program", &path("programs/marked_gm3.txt"), "--kernel", "gm3", "--constants", "0,1"]), EXIT_FAILED);
    assert_eq!(run(&["repair", "--program", &path("programs/broken_gm3.txt"), "--kernel", "gm3"]), EXIT_USAGE);
    assert_eq!(run(&["repair", "--program", &path("programs/golden_gm3.txt"), "--kernel", "gm3", "--backend", "replay", "--fixtures", &path("replay")]), EXIT_OK);
}

#[test]
fn optimize_and_simulate() {
    let (_d, out) = out_dir();
    let golden = path("programs/golden_gm3.txt");
    assert_eq!(run(&["--out", &out, "optimize", "--program", &golden, "--kernel", "gm3"]), EXIT_OK);
    let spec = &fixture("gm3").unwrap().spec;
    let p = parse_program(&fs::read_to_string(&golden).unwrap(), &spec.buffer_table(4)).unwrap();
    assert_eq!(fs::read_to_string(Path::new(&out).join("optimized.txt")).unwrap(), render_program(&p));
    assert_eq!(run(&["optimize", "--program", &path("programs/broken_gm3.txt"), "--kernel", "gm3"]), EXIT_FAILED);
    assert_eq!(run(&["optimize", "--program", &golden, "--kernel", "gm3", "--mode", "llm"]), EXIT_USAGE);

    assert_eq!(run(&["--out", &out, "simulate", "--program", &path("programs/golden_gv2.txt"), "--kernel", "gv2", "--seed", "5"]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("simulate.json")).unwrap()).unwrap();
    assert_eq!(report["matches_reference"], true);
    assert_eq!(run(&["simulate", "--program", &path("programs/golden_gv2.txt"), "--kernel", "gm3"]), EXIT_FAILED);
}

#[test]
fn translate_with_and_without_backend() {
    let (_d, out) = out_dir();
    assert_eq!(run(&["--out", &out, "translate", "--kernel", "gv2"]), EXIT_OK);
    let prompt = fs::read_to_string(Path::new(&out).join("prompt.txt")).unwrap();
    assert!(prompt.contains("Example 1:"));
    let code = run(&[
        "--out", &out, "translate", "--kernel", "gm4", "--config", &path("experiment.toml"),
        "--backend", "replay", "--fixtures", &path("replay"), "--seed", "7",
    ]);
    assert_eq!(code, EXIT_OK);
    let samples: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("candidates.json")).unwrap()).unwrap();
    let passing = samples.as_array().unwrap().iter().filter(|s| s["verdict"] == "pass").count();
    assert_eq!(passing, 5);
}

#[test]
fn schedule_replay_and_transcript_agree() {
    let (_a, a) = out_dir();
    let (_b, b) = out_dir();
    assert_eq!(run(&["--out", &a, "schedule", "--backend", "replay", "--fixtures", &path("replay"), "--n", "3"]), EXIT_OK);
    assert_eq!(run(&["--out", &b, "schedule", "--transcript", &path("transcripts/doitgen.txt")]), EXIT_OK);
    for name in ["schedule.json", "schedule.exo"] {
        assert_eq!(fs::read(Path::new(&a).join(name)).unwrap(), fs::read(Path::new(&b).join(name)).unwrap());
    }
    let records: Vec<SessionRecord> = serde_json::from_str(&fs::read_to_string(Path::new(&a).join("schedule.json")).unwrap()).unwrap();
    let accepted: Vec<bool> = records.iter().map(|r| r.accepted()).collect();
    assert_eq!(accepted, [false, true, false]);
    assert_eq!(run(&["schedule", "--backend", "replay", "--fixtures", &path("replay"), "--n", "4"]), EXIT_BACKEND);
    assert_eq!(run(&["schedule"]), EXIT_USAGE);
}
