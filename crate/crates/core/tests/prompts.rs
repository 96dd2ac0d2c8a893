use talift_core::kernels::{fixture, generate_testcases, target_kernels, verify_text};
use talift_core::prompt::*;
use talift_core::sim::MachineConfig;

fn spec(name: &str) -> PromptSpec {
    PromptSpec::new(fixture(name).unwrap().spec.clone())
}

fn fenced(text: &str) -> &str {
    let start = text.find("```\n").unwrap() + 4;
    let end = text[start..].find("```").unwrap() + start;
    &text[start..end]
}

/// True when `small` can be obtained from `big` by deleting characters.
fn is_subsequence(small: &str, big: &str) -> bool {
    let mut it = big.chars();
    small.chars().all(|c| it.any(|b| b == c))
}

#[test]
fn example_descriptions_match_kernel_wording() {
    for (id, kernel) in [("matvec", "gv1"), ("matmat", "gm1"), ("matmat_tb", "gm2")] {
        let text = example_text(id, true).unwrap();
        let f = fixture(kernel).unwrap();
        assert_eq!(f.spec.in_context_example.as_deref(), Some(id));
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line, format!("// {}", f.spec.describe()), "{id}");
        assert!(text.contains(f.spec.test_function().trim_end()), "{id}");
    }
}

#[test]
fn example_programs_are_correct() {
    let cfg = MachineConfig::default();
    for (id, kernel) in [("matmat", "gm1"), ("matmat_tb", "gm2")] {
        let spec = &fixture(kernel).unwrap().spec;
        let cases = generate_testcases(spec, 3, 5, cfg.dim);
        for annotated in [true, false] {
            let code = fenced(example_text(id, annotated).unwrap());
            let v = verify_text(code, spec, &cases, cfg, false);
            assert!(v.passed, "{id} annotated={annotated}: {:?}", v.failure);
        }
    }
}

/// The shipped matrix-vector example loads the transposed 12x4 operand with a
/// single 12-column mvin at a 4-element stride, which reads overlapping rows.
/// It is kept as written; the golden gv1 program uses three 4x4 mvins.
#[test]
fn matvec_example_wide_mvin_overlaps() {
    let cfg = MachineConfig::default();
    let spec = &fixture("gv1").unwrap().spec;
    let cases = generate_testcases(spec, 3, 5, cfg.dim);
    let code = fenced(example_text("matvec", true).unwrap());
    let v = verify_text(code, spec, &cases, cfg, false);
    assert!(!v.passed);
    assert!(matches!(v.failure, Some(talift_core::kernels::Failure::WrongResult { .. })));
    let fixed = code.replace(
        "mvin(Bdyn, Bdyn_sp_addr, 12, 4);",
        "mvin(Bdyn, Bdyn_sp_addr, 4, 4); mvin(Bdyn + 16, Bdyn_sp_addr + 4, 4, 4); mvin(Bdyn + 32, Bdyn_sp_addr + 8, 4, 4);",
    );
    assert!(verify_text(&fixed, spec, &cases, cfg, false).passed);
}

#[test]
fn stripped_examples_remove_only_comments() {
    for (id, annotated, stripped) in EXAMPLES {
        assert_eq!(strip_annotations(annotated), *stripped, "{id}");
        let code = fenced(stripped);
        assert!(!code.contains("//"), "{id}");
        // every stripped code line is a prefix of a line of the annotated code
        let original = fenced(annotated);
        for line in code.lines() {
            assert!(original.lines().any(|l| l.starts_with(line)), "{id}: {line}");
        }
    }
}

#[test]
fn no_isa_is_strict_subsequence() {
    for f in target_kernels() {
        for position in [ExamplesPosition::BeforeInstructions, ExamplesPosition::AfterInstructions] {
            let mut with = spec(&f.spec.name);
            with.examples_position = position;
            let mut without = with.clone();
            without.include_isa = false;
            let a = build_translation_prompt(&with).unwrap().text();
            let b = build_translation_prompt(&without).unwrap().text();
            assert!(b.len() < a.len());
            assert!(is_subsequence(&b, &a));
            assert!(!b.contains(ISA_TEXT.trim_end()));
            assert!(a.contains(ISA_TEXT.trim_end()));
        }
    }
}

#[test]
fn examples_position_flips_order() {
    let mut s = spec("gv3");
    s.examples_position = ExamplesPosition::AfterInstructions;
    let after = build_translation_prompt(&s).unwrap();
    s.examples_position = ExamplesPosition::BeforeInstructions;
    let before = build_translation_prompt(&s).unwrap();
    assert_ne!(after.fingerprint, before.fingerprint);
    let pos = |t: &str, needle: &str| t.find(needle).unwrap();
    let (a, b) = (after.text(), before.text());
    assert!(pos(&a, "Your task is to rewrite") < pos(&a, "Example 1:"));
    assert!(pos(&b, "Example 1:") < pos(&b, "Your task is to rewrite"));
    assert!(pos(&b, "Example 1:") < pos(&b, "config_ex(dataflow"));
}

#[test]
fn source_style_and_shots() {
    let mut s = spec("gm3");
    s.source_style = SourceStyle::Both;
    s.shots = 2;
    let t = build_translation_prompt(&s).unwrap().text();
    assert!(t.contains("Example 2:") && t.contains("Write the low level code for Example 3."));
    assert!(t.contains("NEG_I"));
    assert_eq!(s.example_kernels().unwrap(), vec!["gv1".to_string(), "gm2".to_string()]);
    s.shots = 3;
    assert!(matches!(build_translation_prompt(&s), Err(PromptError::TooManyShots(3, 2))));
}

#[test]
fn fingerprint_is_deterministic() {
    let s = spec("gm4");
    assert_eq!(build_translation_prompt(&s).unwrap(), build_translation_prompt(&s.clone()).unwrap());
    let mut t = s.clone();
    t.nl_annotated = false;
    assert_ne!(build_translation_prompt(&s).unwrap().fingerprint, build_translation_prompt(&t).unwrap().fingerprint);
    let mut u = s.clone();
    u.role_split = RoleSplit::UserOnly;
    let p = build_translation_prompt(&u).unwrap();
    assert_eq!(p.messages.len(), 1);
    assert_eq!(p.text(), build_translation_prompt(&s).unwrap().text());
}

#[test]
fn reorder_labels() {
    let one = build_reorder_prompt(&["fence();".into()], ISA_TEXT).unwrap();
    assert!(one.text().contains("Block 0:") && !one.text().contains("Block 1"));
    let three: Vec<String> = (0..3).map(|i| format!("mvout(C + {i}, 0x80000000, 1, 1);")).collect();
    let t = build_reorder_prompt(&three, ISA_TEXT).unwrap().text();
    for i in 0..3 {
        assert!(t.contains(&format!("Block {i}:")));
    }
    assert!(t.contains("Return the plan as a list of blocks."));
    assert_eq!(build_reorder_prompt(&[], ISA_TEXT), Err(PromptError::NoBlocks));
}

#[test]
fn all_prompts_fit_in_32k() {
    const LIMIT: usize = 32 * 1024;
    for f in talift_core::kernels::fixtures() {
        for shots in 0..=2 {
            for style in [SourceStyle::NlOnly, SourceStyle::CodeOnly, SourceStyle::Both] {
                let mut s = spec(&f.spec.name);
                s.shots = shots;
                s.source_style = style;
                let p = build_translation_prompt(&s).unwrap();
                assert!(p.byte_len() <= LIMIT, "{} {shots} {style:?}: {}", f.spec.name, p.byte_len());
            }
        }
        let golden = f.golden.clone();
        let p = build_block_optimize_prompt(&golden, ISA_TEXT, &default_heuristics());
        assert!(p.byte_len() <= LIMIT, "optimize {}: {}", f.spec.name, p.byte_len());
        let p = build_reorder_prompt(std::slice::from_ref(&golden), ISA_TEXT).unwrap();
        assert!(p.byte_len() <= LIMIT, "reorder {}: {}", f.spec.name, p.byte_len());
        let (p1, p2) = build_repair_prompts(&golden, &[0, 1, 3, 4, 12]).unwrap();
        let conv = repair_fill_conversation(&p1, &golden, &p2);
        assert!(conv.byte_len() <= LIMIT, "repair {}: {}", f.spec.name, conv.byte_len());
    }
}
