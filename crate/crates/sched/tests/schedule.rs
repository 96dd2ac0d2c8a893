use proptest::prelude::*;
use talift_sched::session::DOITGEN;
use talift_sched::*;

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

const REORDER_SNIPPET: &str = "\
def doitgen(A: f32[64, 64, 64] @ DRAM, C4: f32[64, 64] @ DRAM,
            sum: f32[64] @ DRAM):
    for r in seq(0, 64):
        for q in seq(0, 64):
            ...
            for p in seq(0, 64):
                A[r, q, p] = sum[p]  # <-- NODE";

fn doitgen() -> LoopNest {
    parse_kernel(DOITGEN).unwrap()
}

fn tile(line: &str, size: i64, outer: &str, inner: &str) -> ScheduleCommand {
    ScheduleCommand::Tile { line: line.into(), tile_size: size, outer_name: outer.into(), inner_name: inner.into() }
}

fn unroll(line: &str) -> ScheduleCommand {
    ScheduleCommand::Unroll { line: line.into() }
}

#[test]
fn doitgen_structure_and_round_trip() {
    let k = doitgen();
    assert_eq!(k.render(), DOITGEN);
    let Stmt::Loop(r) = &k.body[0] else { panic!() };
    let Stmt::Loop(q) = &r.body[0] else { panic!() };
    assert_eq!(q.body.len(), 2);
    let Stmt::Loop(p) = &q.body[0] else { panic!() };
    assert!(matches!(p.body[0], Stmt::Assign { .. }));
    let Stmt::Loop(s) = &p.body[1] else { panic!() };
    assert!(matches!(s.body[0], Stmt::Accumulate { .. }));
    assert!(matches!(&q.body[1], Stmt::Loop(copy) if matches!(copy.body[0], Stmt::Assign { .. })));
    assert!(parse_kernel("def f(x: f32[4] @ DRAM):\n").is_err());
}

#[test]
fn tiling_matches_expected_kernel() {
    let tiled = apply_schedule_command(&doitgen(), &tile("for p in seq(0, 64): #1", 16, "p_outer", "p_inner")).unwrap();
    assert_eq!(tiled, parse_kernel(TILED).unwrap());
}

#[test]
fn reorder_error_surface() {
    let k = doitgen();
    let err = apply_schedule_command(&k, &ScheduleCommand::Reorder { line: "for p in seq(0, 64): #1".into() }).unwrap_err();
    let text = err.to_string();
    assert!(text.starts_with(REORDER_SINGLE_LOOP), "{text}");
    assert!(text.ends_with(REORDER_SNIPPET), "{text}");
    let err = apply_schedule_command(&k, &ScheduleCommand::Reorder { line: "for p in seq(0, 64): #0".into() }).unwrap_err();
    assert!(err.to_string().contains(REORDER_SINGLE_LOOP));
    assert!(err.to_string().contains("sum[p] = 0.0  # <-- NODE"));
}

#[test]
fn line_matching_errors() {
    let k = doitgen();
    let err = apply_schedule_command(&k, &unroll("for s_outer in seq(0, 4):")).unwrap_err();
    assert_eq!(err, SchedError::LineNotFound("for s_outer in seq(0, 4):".into()));
    assert!(matches!(apply_schedule_command(&k, &unroll("for p in seq(0, 64):")), Err(SchedError::AmbiguousLine(_, 2))));
    assert!(matches!(apply_schedule_command(&k, &unroll("for p in seq(0, 64): #2")), Err(SchedError::LineNotFound(_))));
    assert_eq!(find_line(&k, "for p in seq(0,64): #1").unwrap(), vec![0, 0, 1]);
    assert_eq!(
        apply_schedule_command(&k, &tile("for p in seq(0, 64): #1", 7, "a", "b")),
        Err(SchedError::NonDivisibleTile { extent: 64, tile: 7 })
    );
    assert!(apply_schedule_command(&k, &tile("for p in seq(0, 64): #1", 16, "q", "b")).is_err());
}

#[test]
fn fission_fuse_and_reorder_legality() {
    let k = doitgen().with_extent(64, 8);
    let split = ScheduleCommand::Fission { line: "sum[p] = 0.0".into(), location: FissionLocation::After };
    let f = apply_schedule_command(&k, &split).unwrap();
    assert!(check_equivalence(&k, &f, 5, 1).unwrap().passed);

    let swap = ScheduleCommand::Reorder { line: "for p in seq(0, 8): #1".into() };
    let r = apply_schedule_command(&f, &swap).unwrap();
    assert!(r.render().contains("for s in seq(0, 8):\n                for p in seq(0, 8):"));
    assert!(check_equivalence(&k, &r, 5, 1).unwrap().passed);

    let fused = apply_schedule_command(
        &f,
        &ScheduleCommand::Fuse { line1: "for p in seq(0, 8): #0".into(), line2: "for p in seq(0, 8): #1".into() },
    )
    .unwrap();
    assert_eq!(fused, k);

    // splitting the q loop would read `sum` after later iterations overwrote it
    let bad = ScheduleCommand::Fission { line: "for p in seq(0, 8): #1".into(), location: FissionLocation::Before };
    assert!(matches!(apply_schedule_command(&k, &bad), Err(SchedError::IllegalRewrite(_))));
    let bad_fuse =
        ScheduleCommand::Fuse { line1: "for p in seq(0, 8): #0".into(), line2: "for p in seq(0, 8): #1".into() };
    assert!(matches!(apply_schedule_command(&k, &bad_fuse), Err(SchedError::IllegalRewrite(_))));
}

fn doitgen_oracle(n: usize, a: &[f32], c4: &[f32]) -> Vec<f32> {
    let mut out = a.to_vec();
    for r in 0..n {
        for q in 0..n {
            let mut sum = vec![0.0f32; n];
            for (p, slot) in sum.iter_mut().enumerate() {
                for s in 0..n {
                    *slot += a[(r * n + q) * n + s] * c4[s * n + p];
                }
            }
            out[(r * n + q) * n..(r * n + q + 1) * n].copy_from_slice(&sum);
        }
    }
    out
}

#[test]
fn interpreter_against_oracles() {
    let k = doitgen().with_extent(64, 4);
    let mut inputs = random_inputs(&k, 3, 0);
    let a = inputs["A"].clone();
    let out = interpret(&k, &inputs).unwrap();
    assert_eq!(out["A"], doitgen_oracle(4, &a, &inputs["C4"]));

    let identity: Vec<f32> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    inputs.insert("C4".into(), identity);
    assert_eq!(interpret(&k, &inputs).unwrap()["A"], a);

    let zeros = inputs.iter().map(|(n, v)| (n.clone(), vec![0.0; v.len()])).collect();
    assert!(interpret(&k, &zeros).unwrap().values().all(|v| v.iter().all(|x| *x == 0.0)));

    inputs.get_mut("sum").unwrap().pop();
    assert!(matches!(interpret(&k, &inputs), Err(SchedError::ShapeMismatch(_))));
}

#[test]
fn equivalence_verdicts() {
    let k = doitgen().with_extent(64, 8);
    assert!(check_equivalence(&k, &k, 5, 0).unwrap().passed);
    let flipped = parse_kernel(&k.render().replace("+= A[r, q, s] * C4[s, p]", "+= -(A[r, q, s] * C4[s, p])")).unwrap();
    let v = check_equivalence(&k, &flipped, 5, 0).unwrap();
    assert!(!v.passed);
    assert_eq!(v.mismatch.unwrap().trial, 0);
    let other = parse_kernel("def f(x: f32[4] @ DRAM):\n    for i in seq(0, 4):\n        x[i] = 0.0\n").unwrap();
    assert!(matches!(check_equivalence(&k, &other, 1, 0), Err(SchedError::SignatureMismatch(_))));
}

#[test]
fn locality_cost_formula() {
    let n = 64f64;
    let base = locality_cost_with(&doitgen(), DEFAULT_PENALTY);
    assert_eq!(base.loop_iterations, n + n * n + 2.0 * n.powi(3) + n.powi(4));
    assert_eq!(base.statements, 2.0 * n.powi(3) + n.powi(4));
    // C4[s, p] advances by a row per step of s
    assert_eq!(base.strided_accesses, n.powi(4));

    let tiled = parse_kernel(TILED).unwrap();
    let t = locality_cost_with(&tiled, DEFAULT_PENALTY);
    assert_eq!(t.total - base.total, n * n * 4.0);

    let unrolled = apply_schedule_command(&tiled, &unroll("for p_outer in seq(0, 4):")).unwrap();
    let u = locality_cost_with(&unrolled, DEFAULT_PENALTY);
    assert_eq!(u.strided_accesses, t.strided_accesses);
    assert_eq!(t.loop_iterations - u.loop_iterations, n * n * 4.0);

    let empty = LoopNest { name: "e".into(), arrays: vec![], body: vec![] };
    assert_eq!(locality_cost(&empty), 0.0);
}

#[test]
fn unrolled_tile_shape() {
    let k = parse_kernel(TILED).unwrap();
    let u = apply_schedule_command(&k, &unroll("for p_inner in seq(0, 16):")).unwrap();
    let text = u.render();
    assert!(text.contains("A[r, q, 16 * p_outer] = sum[16 * p_outer]"));
    assert!(text.contains("A[r, q, 15 + 16 * p_outer] = sum[15 + 16 * p_outer]"));
}

#[test]
fn transcript_replay() {
    let mut session = Session::new(doitgen(), SessionConfig::default());
    let replies = [
        r#"APPLY: {"optimization": "reorder", "arguments": {"line": "for p in seq(0, 64): #1"}}"#,
        r#"APPLY: {"optimization": "tile", "arguments": {"line": "for p in seq(0, 64): #1", "tile_size": "16", "outer_name": "p_outer", "inner_name": "p_inner"}}"#,
        r#"APPLY: {"optimization": "unroll", "arguments": {"line": "for s_outer in seq(0, 4):"}}"#,
    ];
    let results: Vec<SessionRecord> = replies.iter().map(|r| session.step(r)).collect();
    assert!(results[0].result.contains(REORDER_SINGLE_LOOP));
    assert!(results[1].accepted());
    assert!(results[2].result.contains("could not find line"));
    assert_eq!(session.kernel, parse_kernel(TILED).unwrap());
    assert!(session.feedback(&results[0]).starts_with("An error occurred while applying the optimization:\n"));
    assert!(session.feedback(&results[1]).contains("for p_outer in seq(0, 4):"));
    let json = serde_json::to_string(&session.records).unwrap();
    assert_eq!(serde_json::from_str::<Vec<SessionRecord>>(&json).unwrap(), session.records);
    let opening = session.opening_messages();
    assert!(opening[1].text.contains("def doitgen("));
}

fn line_kernel(n: i64) -> LoopNest {
    parse_kernel(&format!(
        "def f(x: f32[{n}] @ DRAM, y: f32[{n}] @ DRAM):\n    for i in seq(0, {n}):\n        x[i] = y[i] * 2.0 + x[i]\n"
    ))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tile_then_unroll_matches_unroll(n in 1i64..=24, pick in 0usize..8) {
        let divisors: Vec<i64> = (1..=n).filter(|d| n % d == 0).collect();
        let size = divisors[pick % divisors.len()];
        let k = line_kernel(n);
        let header = format!("for i in seq(0, {n}):");
        let tiled = apply_schedule_command(&k, &tile(&header, size, "io", "ii")).unwrap();
        let outer = apply_schedule_command(&tiled, &unroll(&format!("for io in seq(0, {}):", n / size))).unwrap();
        let lines = outer.lines();
        let mut flat = outer.clone();
        for occurrence in 0..lines.iter().filter(|l| l.text.starts_with("for ii")).count() {
            let _ = occurrence;
            flat = apply_schedule_command(&flat, &unroll(&format!("for ii in seq(0, {size}): #0"))).unwrap();
        }
        let direct = apply_schedule_command(&k, &unroll(&header)).unwrap();
        let inputs = random_inputs(&k, 9, 0);
        prop_assert_eq!(interpret(&flat, &inputs).unwrap(), interpret(&direct, &inputs).unwrap());
    }

    #[test]
    fn random_schedules_preserve_semantics(cmds in proptest::collection::vec((0usize..4, 0usize..12, 0usize..3), 1..5)) {
        let base = doitgen().with_extent(64, 4);
        let mut k = base.clone();
        for (kind, target, extra) in cmds {
            let lines = k.lines();
            let line = &lines[target % lines.len()];
            let occurrence = lines.iter().take_while(|l| l.path != line.path).filter(|l| l.text == line.text).count();
            let text = format!("{} #{occurrence}", line.text);
            let cmd = match kind {
                0 => tile(&text, [1, 2, 4][extra], &format!("t{target}o"), &format!("t{target}i")),
                1 => unroll(&text),
                2 => ScheduleCommand::Reorder { line: text },
                _ => ScheduleCommand::Fission {
                    line: text,
                    location: if extra == 0 { FissionLocation::Before } else { FissionLocation::After },
                },
            };
            if let Ok(next) = apply_schedule_command(&k, &cmd) {
                prop_assert_eq!(parse_kernel(&next.render()).unwrap(), next.clone());
                prop_assert!(check_equivalence(&base, &next, 2, 5).unwrap().passed, "{}", next);
                k = next;
            }
        }
    }
}
