use std::fmt::Write;

use super::{ComputeArgs, DramRef, Instruction, LocalAddr, Program, SENTINEL_ADDR};

const FLAG_MASK: u32 = 0xE000_0000;

fn local(addr: LocalAddr) -> String {
    let raw = addr.0;
    let flags = raw & FLAG_MASK;
    let row = raw & !FLAG_MASK;
    if raw == SENTINEL_ADDR {
        "0xffffffff".to_string()
    } else if flags == 0 {
        row.to_string()
    } else if row == 0 {
        format!("0x{flags:08x}")
    } else {
        format!("0x{flags:08x} | {row}")
    }
}

fn optional(addr: Option<LocalAddr>) -> String {
    addr.map(local).unwrap_or_else(|| "0xffffffff".to_string())
}

fn dram(d: &DramRef) -> String {
    if d.element_offset == 0 {
        d.buffer.clone()
    } else {
        format!("{} + {}", d.buffer, d.element_offset)
    }
}

fn stride(bytes: u32) -> String {
    if bytes.is_multiple_of(4) {
        format!("{} * sizeof(float)", bytes / 4)
    } else {
        bytes.to_string()
    }
}

fn bool_lit(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

fn compute(name: &str, c: &ComputeArgs) -> String {
    format!(
        "{name}({}, {}, {}, {}, {}, {});",
        local(c.a_local),
        optional(c.d_local),
        c.a_cols,
        c.a_rows,
        c.d_cols,
        c.d_rows
    )
}

/// Renders one instruction as a single macro-call statement.
pub fn render_instruction(instr: &Instruction) -> String {
    match instr {
        Instruction::ConfigEx { dataflow, act, a_transpose, b_transpose } => format!(
            "config_ex({}, {}, {}, {});",
            dataflow.name(),
            act.name(),
            bool_lit(*a_transpose),
            bool_lit(*b_transpose)
        ),
        Instruction::ConfigLd { stride_bytes, channel } => {
            format!("config_ld({}, {channel});", stride(*stride_bytes))
        }
        Instruction::ConfigSt { stride_bytes } => format!("config_st({});", stride(*stride_bytes)),
        Instruction::Mvin { channel, dram: d, local: l, cols, rows } => {
            let name = ["mvin", "mvin2", "mvin3"][usize::from(*channel).min(2)];
            format!("{name}({}, {}, {cols}, {rows});", dram(d), local(*l))
        }
        Instruction::Preload { b_local, c_local, b_cols, b_rows, c_cols, c_rows } => format!(
            "preload({}, {}, {b_cols}, {b_rows}, {c_cols}, {c_rows});",
            optional(*b_local),
            local(*c_local)
        ),
        Instruction::PreloadZeros { c_local } => format!("preload_zeros({});", local(*c_local)),
        Instruction::ComputePreloaded(c) => compute("compute_preloaded", c),
        Instruction::ComputeAccumulated(c) => compute("compute_accumulated", c),
        Instruction::Mvout { dram: d, local: l, cols, rows } => {
            format!("mvout({}, {}, {cols}, {rows});", dram(d), local(*l))
        }
        Instruction::Fence => "fence();".to_string(),
    }
}

/// Renders a program as straight-line text: symbol declarations first, then
/// one statement per instruction.
pub fn render_program(p: &Program) -> String {
    let mut out = String::new();
    for (name, value) in &p.symbols {
        let _ = writeln!(out, "static uint32_t {name} = {value};");
    }
    for instr in &p.instructions {
        out.push_str(&render_instruction(instr));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{buffer_table, parse_program, BufferDecl, BufferRole};

    #[test]
    fn fence_renders_once() {
        let p = Program::new(Default::default(), vec![Instruction::Fence]);
        assert_eq!(render_program(&p).matches("fence();").count(), 1);
    }

    #[test]
    fn accumulator_address_round_trips() {
        let buffers = buffer_table([BufferDecl::new("A", 4, 4, BufferRole::Input)]);
        let p = Program::new(buffers.clone(), vec![Instruction::Mvin {
            channel: 0,
            dram: DramRef::new("A", 4),
            local: LocalAddr(0x8000_0000),
            cols: 4,
            rows: 4,
        }]);
        let text = render_program(&p);
        assert!(text.contains("0x80000000"), "{text}");
        assert_eq!(parse_program(&text, &buffers).unwrap(), p);
    }
}
