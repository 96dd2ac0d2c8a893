//! Acceptance checks, one line per criterion. Every check returns a digest
//! of what it observed; the last criterion reruns the others and compares.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use talift_cli::EXIT_OK;
use talift_core::cost::{program_cost, CostParams};
use talift_core::eval::pass_at_k;
use talift_core::isa::{render_program, Instruction, Program};
use talift_core::kernels::{fixtures, generate_testcases, target_kernels, verify_program, TestCase};
use talift_core::llm::GenerationParams;
use talift_core::opt::{optimize_program, reassemble, segment_blocks, OptimizeMode};
use talift_core::prompt::{build_translation_prompt, strip_annotations, ExamplesPosition, PromptSpec, EXAMPLES};
use talift_core::repair::{constant_sites, extract_holes, mark_sites, repair_template, RepairOptions, DEFAULT_CONSTANTS};
use talift_core::sim::{Machine, MachineConfig};
use talift_sched::session::DOITGEN;
use talift_sched::{apply_schedule_command, check_equivalence, parse_kernel, Session, SessionConfig, REORDER_SINGLE_LOOP};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    ensure(started.elapsed() < limit, || format!("took {:.2?}, limit {limit:?}", started.elapsed()))
}

fn simulator_oracle() -> Check {
    let started = Instant::now();
    let cfg = MachineConfig::default();
    let mut digest = String::new();
    let targets: Vec<_> = target_kernels().collect();
    ensure(targets.len() == 9, || format!("{} target kernels", targets.len()))?;
    for f in targets {
        let cases = generate_testcases(&f.spec, 20, 20, cfg.dim);
        let v = verify_program(&f.golden_program(cfg.dim), &f.spec, &cases, cfg);
        ensure(v.passed, || format!("{}: {}", f.spec.name, v.label()))?;
        writeln!(digest, "{} {:?}", f.spec.name, v.outcomes).unwrap();
    }
    within(started, Duration::from_secs(10))?;
    Ok(digest)
}

/// Fraction of k-subsets of n samples (the first c correct) with a hit.
fn subset_oracle(n: u32, c: u32, k: u32) -> f64 {
    let correct = (1u32 << c) - 1;
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() == k {
            total += 1;
            hit += u64::from(mask & correct != 0);
        }
    }
    hit as f64 / total as f64
}

fn pass_at_k_estimator() -> Check {
    let mut digest = String::new();
    for n in 1..=12u64 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
                let want = subset_oracle(n as u32, c as u32, k as u32);
                ensure((got - want).abs() <= 1e-12, || format!("n={n} c={c} k={k}: {got} vs {want}"))?;
                write!(digest, "{:x} ", got.to_bits()).unwrap();
            }
        }
        for k in 1..=n {
            let (zero, all) = (pass_at_k(n, 0, k).unwrap(), pass_at_k(n, n, k).unwrap());
            ensure(zero == 0.0 && all == 1.0, || format!("boundaries at n={n} k={k}"))?;
        }
    }
    Ok(digest)
}

fn is_subsequence(small: &str, big: &str) -> bool {
    let mut it = big.chars();
    small.chars().all(|c| it.any(|b| b == c))
}

fn prompt_ablations() -> Check {
    let mut digest = String::new();
    for (id, annotated, stripped) in EXAMPLES {
        ensure(strip_annotations(annotated) == *stripped, || format!("{id}: stripped asset differs"))?;
        // removed material is exactly the comments
        let kept: Vec<&str> = stripped.lines().collect();
        let mut expect = Vec::new();
        let mut fenced = false;
        for line in annotated.lines() {
            if line.starts_with("```") {
                fenced = !fenced;
            }
            match line.find("//") {
                Some(_) if fenced && line.trim_start().starts_with("//") => {}
                Some(at) if fenced => expect.push(line[..at].trim_end()),
                _ => expect.push(line),
            }
        }
        ensure(kept == expect, || format!("{id}: stripping removed more than comments"))?;
    }
    for f in target_kernels() {
        let base = PromptSpec::new(f.spec.clone());
        for position in [ExamplesPosition::BeforeInstructions, ExamplesPosition::AfterInstructions] {
            let with = PromptSpec { examples_position: position, ..base.clone() };
            let without = PromptSpec { include_isa: false, ..with.clone() };
            let (a, b) = (build_translation_prompt(&with).map_err(|e| e.to_string())?, build_translation_prompt(&without).map_err(|e| e.to_string())?);
            ensure(b.text().len() < a.text().len() && is_subsequence(&b.text(), &a.text()), || format!("{}: No-ISA not a strict subsequence", f.spec.name))?;
            ensure(build_translation_prompt(&with).unwrap().fingerprint == a.fingerprint, || "fingerprint not deterministic".into())?;
            writeln!(digest, "{} {position:?} {} {}", f.spec.name, a.fingerprint, b.fingerprint).unwrap();
        }
        let after = build_translation_prompt(&PromptSpec { examples_position: ExamplesPosition::AfterInstructions, ..base.clone() }).unwrap();
        let before = build_translation_prompt(&PromptSpec { examples_position: ExamplesPosition::BeforeInstructions, ..base.clone() }).unwrap();
        let pos = |t: &str, needle: &str| t.find(needle);
        let (at, bt) = (after.text(), before.text());
        let flipped = pos(&at, "Your task is to rewrite") < pos(&at, "Example 1:") && pos(&bt, "Example 1:") < pos(&bt, "Your task is to rewrite");
        ensure(flipped && after.fingerprint != before.fingerprint, || format!("{}: section order did not flip", f.spec.name))?;
        let stripped = build_translation_prompt(&PromptSpec { nl_annotated: false, ..base.clone() }).unwrap();
        let annotated = build_translation_prompt(&base).unwrap();
        ensure(stripped.fingerprint != annotated.fingerprint, || format!("{}: annotation flag ignored", f.spec.name))?;
    }
    Ok(digest)
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn binomial(n: u64, k: u64) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1))
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn replay_evaluate() -> Check {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_talift"))
                .arg("--out")
                .arg(dir.path())
                .args(["evaluate", "--config"])
                .arg(fixture_dir().join("experiment.toml"))
                .args(["--backend", "replay", "--fixtures"])
                .arg(fixture_dir().join("replay"))
                .output()
                .unwrap()
                .status;
            (status.code().unwrap_or(-1), read_tree(dir.path()))
        })
        .collect();
    for (code, _) in &runs {
        ensure(*code == EXIT_OK, || format!("evaluate exited with {code}"))?;
    }
    ensure(runs[0].1 == runs[1].1, || "outputs differ between runs".into())?;
    let (_, files) = &runs[0];
    let report = files.iter().find(|(p, _)| p == Path::new("report.json")).ok_or("no report.json")?;
    let report: serde_json::Value = serde_json::from_slice(&report.1).map_err(|e| e.to_string())?;
    let closed_form = 1.0 - binomial(20, 10) as f64 / binomial(40, 10) as f64;
    for row in report["rows"].as_array().ok_or("no rows")? {
        let at = |k: u64| row["pass_at_k"].as_array().unwrap().iter().find(|e| e[0] == k).and_then(|e| e[1].as_f64());
        ensure(at(1) == Some(0.5), || format!("{}: pass@1 = {:?}", row["label"], at(1)))?;
        let p10 = at(10).ok_or("pass@10 missing")?;
        ensure((p10 - closed_form).abs() <= 1e-12, || format!("pass@10 {p10} vs {closed_form}"))?;
    }
    let csv = files.iter().find(|(p, _)| p == Path::new("report.csv")).ok_or("no report.csv")?;
    Ok(String::from_utf8_lossy(&csv.1).into_owned())
}

fn in_set_sites(code: &str) -> Vec<usize> {
    constant_sites(code).iter().enumerate().filter(|(_, s)| DEFAULT_CONSTANTS.contains(&s.2)).map(|(i, _)| i).collect()
}

fn perturb(code: &str, sites: &[usize]) -> String {
    let all = constant_sites(code);
    let mut out = code.to_string();
    for &i in sites.iter().rev() {
        let (start, end, value) = all[i];
        let other = DEFAULT_CONSTANTS.iter().find(|&&v| v != value).unwrap();
        out.replace_range(start..end, &other.to_string());
    }
    out
}

fn repair_completeness() -> Check {
    let started = Instant::now();
    let cfg = MachineConfig::default();
    let opts = RepairOptions::default();
    let mut digest = String::new();
    let mut attempt = |name: &str, golden: &str, spec, cases: &[TestCase], sites: &[usize], limit: usize| -> Result<(), String> {
        let broken = perturb(golden, sites);
        let template = extract_holes(&mark_sites(&broken, sites), None).map_err(|e| e.to_string())?;
        let r = repair_template(&template, spec, cases, &DEFAULT_CONSTANTS, &opts, cfg).map_err(|e| e.to_string())?;
        ensure(r.is_repaired() && r.stats.candidates_tried <= limit, || format!("{name} {sites:?}: {:?}", r.outcome))?;
        writeln!(digest, "{name} {sites:?} {}", r.stats.candidates_tried).unwrap();
        Ok(())
    };
    for f in target_kernels() {
        let cases = generate_testcases(&f.spec, 5, 8, cfg.dim);
        let sites = in_set_sites(&f.golden);
        for &s in &sites {
            attempt(&f.spec.name, &f.golden, &f.spec, &cases, &[s], 5)?;
        }
        for triple in sites.windows(3).step_by(3).take(4) {
            attempt(&f.spec.name, &f.golden, &f.spec, &cases, triple, 125)?;
        }
    }
    within(started, Duration::from_secs(60))?;
    Ok(digest)
}

fn inject_redundancy(p: &Program) -> Program {
    let mut out = Vec::new();
    for (i, instr) in p.instructions.iter().enumerate() {
        out.push(instr.clone());
        let dup = matches!(instr, Instruction::Preload { .. }) || (matches!(instr, Instruction::Mvin { .. }) && i % 2 == 0);
        if dup {
            out.push(instr.clone());
        }
    }
    p.with_instructions(out)
}

fn dram(p: &Program, case: &TestCase) -> Vec<u32> {
    let mut m = Machine::with_buffers(MachineConfig::default(), &p.buffers, &case.inputs).unwrap();
    m.execute(p).unwrap();
    m.dram().values().flat_map(|x| x.data.iter().map(|v| v.to_bits())).collect()
}

fn optimizer() -> Check {
    let cfg = MachineConfig::default();
    let params = CostParams::default();
    let gen = GenerationParams::default();
    let mut digest = String::new();
    for f in fixtures() {
        let golden = f.golden_program(cfg.dim);
        let blocks = segment_blocks(&golden, cfg.dim as u32).map_err(|e| e.to_string())?;
        let identity: Vec<usize> = (0..blocks.len()).collect();
        let reassembled = render_program(&golden.with_instructions(reassemble(&blocks, &identity)));
        ensure(reassembled == render_program(&golden), || format!("{}: reassembly differs", f.spec.name))?;

        let cases = generate_testcases(&f.spec, 13, 6, cfg.dim);
        let same = optimize_program(&golden, &f.spec, &cases, OptimizeMode::Rules, None, &gen, &params, cfg).map_err(|e| e.to_string())?;
        ensure(same.program == golden, || format!("{}: golden changed", f.spec.name))?;

        let noisy = inject_redundancy(&golden);
        let r = optimize_program(&noisy, &f.spec, &cases, OptimizeMode::Rules, None, &gen, &params, cfg).map_err(|e| e.to_string())?;
        let before = program_cost(&noisy, &params, &cfg).unwrap().total;
        let after = program_cost(&r.program, &params, &cfg).unwrap().total;
        ensure(after < before, || format!("{}: cost {before} -> {after}", f.spec.name))?;
        for case in &cases {
            ensure(dram(&r.program, case) == dram(&noisy, case), || format!("{}: outputs changed", f.spec.name))?;
        }
        writeln!(digest, "{} {before} {after} {:?}", f.spec.name, r.plan.order).unwrap();
    }
    Ok(digest)
}

const TILED: &str = "\
def doitgen(A: f32[64, 64, 64] @ DRAM, C4: f32[64, 64] @ DRAM,
            sum: f32[64] @ DRAM):
    for r in seq(0, 64):
        for q in seq(0, 64):
            for p in seq(0, 64):
                sum[p] = 0.0
                for s in seq(0, 64):
                    sum[p] += A[r, q, s] * C4[s, p]
            for p_outer in seq(0, 4):
                for p_inner in seq(0, 16):
                    A[r, q,
                      p_inner + 16 * p_outer] = sum[p_inner + 16 * p_outer]
";

fn loop_scheduler() -> Check {
    let started = Instant::now();
    let transcript = fs::read_to_string(fixture_dir().join("transcripts/doitgen.txt")).map_err(|e| e.to_string())?;
    let original = parse_kernel(DOITGEN).map_err(|e| e.to_string())?;
    let mut session = Session::new(original.clone(), SessionConfig::default());
    let mut shadow = original.with_extent(64, 8);
    let mut digest = String::new();
    for reply in transcript.lines() {
        let record = session.step(reply);
        if record.accepted() {
            let cmd = talift_sched::parse_apply(reply).map_err(|e| e.to_string())?.rescaled(64, 8);
            let next = apply_schedule_command(&shadow, &cmd).map_err(|e| e.to_string())?;
            let eq = check_equivalence(&original.with_extent(64, 8), &next, 5, 0).map_err(|e| e.to_string())?;
            ensure(eq.passed && eq.trials == 5, || format!("not equivalent after {reply}"))?;
            shadow = next;
        }
        writeln!(digest, "{} {}", record.result, record.cost).unwrap();
    }
    let r = &session.records;
    ensure(r.len() == 3, || "expected three steps".into())?;
    ensure(r[0].result.starts_with(REORDER_SINGLE_LOOP), || format!("reorder: {}", r[0].result))?;
    ensure(r[1].accepted(), || format!("tile: {}", r[1].result))?;
    ensure(session.kernel == parse_kernel(TILED).unwrap(), || "tiled kernel differs from the expected one".into())?;
    within(started, Duration::from_secs(5))?;
    Ok(digest + &session.kernel.render())
}

const CRITERIA: [Criterion; 7] = [
    ("simulator-oracle equivalence", simulator_oracle),
    ("pass@k estimator", pass_at_k_estimator),
    ("prompt ablation structure", prompt_ablations),
    ("end-to-end replay evaluate", replay_evaluate),
    ("repair completeness", repair_completeness),
    ("optimizer", optimizer),
    ("loop scheduler transcript", loop_scheduler),
];

fn main() {
    let mut failed = 0;
    let mut first = Vec::new();
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let started = Instant::now();
        let result = check();
        let time = started.elapsed();
        match &result {
            Ok(_) => println!("PASS {} {name} ({time:.2?})", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL {} {name} ({time:.2?}): {e}", i + 1);
            }
        }
        first.push(result);
    }
    let started = Instant::now();
    let second: Vec<Check> = CRITERIA.iter().map(|(_, check)| check()).collect();
    let same = first.iter().zip(&second).all(|(a, b)| matches!((a, b), (Ok(x), Ok(y)) if x == y));
    if same {
        println!("PASS 8 determinism ({:.2?})", started.elapsed());
    } else {
        failed += 1;
        println!("FAIL 8 determinism: a rerun produced different results");
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
