use proptest::prelude::*;
use talift_core::cost::*;
use talift_core::isa::{DramRef, Instruction, LocalAddr};
use talift_core::kernels::{fixtures, generate_testcases};
use talift_core::sim::{Machine, MachineConfig};

fn mvin(cols: u32, rows: u32) -> Instruction {
    Instruction::Mvin { channel: 0, dram: DramRef::new("A", 0), local: LocalAddr(0), cols, rows }
}

#[test]
fn per_class_formulas() {
    let p = CostParams::default();
    assert_eq!(instruction_cost(&mvin(4, 4), &p, 4), 1.0 + 0.25 * 64.0);
    assert_eq!(instruction_cost(&Instruction::Fence, &p, 4), 1.0);
    assert_eq!(instruction_cost(&Instruction::PreloadZeros { c_local: LocalAddr(0x8000_0000) }, &p, 4), 5.0);
    let custom = CostParams { pipeline_fill: Some(2), ..p };
    assert_eq!(instruction_cost(&Instruction::PreloadZeros { c_local: LocalAddr(0x8000_0000) }, &custom, 4), 3.0);
}

#[test]
fn byte_counts_match_the_simulator() {
    let cfg = MachineConfig::default();
    for f in fixtures() {
        let program = f.golden_program(cfg.dim);
        let cost = program_cost(&program, &CostParams::default(), &cfg).unwrap();
        let case = &generate_testcases(&f.spec, 3, 1, cfg.dim)[0];
        let mut m = Machine::with_buffers(cfg, &program.buffers, &case.inputs).unwrap();
        m.execute(&program).unwrap();
        assert_eq!((cost.dram_bytes_in, cost.dram_bytes_out), (m.bytes_in, m.bytes_out), "{}", f.spec.name);
        assert_eq!(cost.counts.total(), program.instructions.len());
        assert_eq!(cost.per_instruction.iter().sum::<f64>(), cost.total);
    }
}

#[test]
fn feedback_lines() {
    let cfg = MachineConfig::default();
    let f = &fixtures()[0];
    let c = program_cost(&f.golden_program(cfg.dim), &CostParams::default(), &cfg).unwrap();
    let text = render_feedback(&c, Some(&c));
    assert!(text.starts_with(&format!("total: {}\n", c.total)));
    assert!(text.contains("Δtotal: +0"));
}

fn arb_instr() -> impl Strategy<Value = Instruction> {
    prop_oneof![
        (1u32..=16, 1u32..=4).prop_map(|(c, r)| mvin(c, r)),
        Just(Instruction::Fence),
        Just(Instruction::PreloadZeros { c_local: LocalAddr(0x8000_0000) }),
    ]
}

proptest! {
    #[test]
    fn additive_and_monotone(a in proptest::collection::vec(arb_instr(), 0..20), b in proptest::collection::vec(arb_instr(), 0..20)) {
        let p = CostParams::default();
        let joined: Vec<Instruction> = a.iter().chain(&b).cloned().collect();
        let whole = instructions_cost(&joined, &p, 4).total;
        let parts = instructions_cost(&a, &p, 4).total + instructions_cost(&b, &p, 4).total;
        prop_assert!((whole - parts).abs() < 1e-9);
        prop_assert!(whole >= instructions_cost(&a, &p, 4).total);
    }
}
