//! Static instruction-level cost model.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{InstrClass, Instruction, IsaError, Program};
use crate::sim::MachineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub issue_cost: u32,
    pub dram_byte_cost: f64,
    pub compute_row_cost: u32,
    /// Charged per preload; `None` means DIM.
    pub pipeline_fill: Option<u32>,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams { issue_cost: 1, dram_byte_cost: 0.25, compute_row_cost: 1, pipeline_fill: None }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CostError {
    #[error("invalid program: {0}")]
    Validation(#[from] IsaError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub config: usize,
    pub mvin: usize,
    pub mvout: usize,
    pub preload: usize,
    pub compute: usize,
    pub fence: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.config + self.mvin + self.mvout + self.preload + self.compute + self.fence
    }

    fn bump(&mut self, class: InstrClass) {
        match class {
            InstrClass::Config => self.config += 1,
            InstrClass::Mvin => self.mvin += 1,
            InstrClass::Mvout => self.mvout += 1,
            InstrClass::Preload => self.preload += 1,
            InstrClass::Compute => self.compute += 1,
            InstrClass::Fence => self.fence += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub counts: ClassCounts,
    pub dram_bytes_in: u64,
    pub dram_bytes_out: u64,
    pub per_instruction: Vec<f64>,
}

/// Cost of one instruction under `params`, with `dim` used for the default
/// pipeline fill.
pub fn instruction_cost(instr: &Instruction, params: &CostParams, dim: u32) -> f64 {
    let class_term = match instr {
        Instruction::Mvin { cols, rows, .. } | Instruction::Mvout { cols, rows, .. } => {
            params.dram_byte_cost * 4.0 * f64::from(*cols) * f64::from(*rows)
        }
        Instruction::Preload { .. } | Instruction::PreloadZeros { .. } => {
            f64::from(params.pipeline_fill.unwrap_or(dim))
        }
        Instruction::ComputePreloaded(c) | Instruction::ComputeAccumulated(c) => {
            f64::from(params.compute_row_cost) * f64::from(c.a_rows)
        }
        _ => 0.0,
    };
    f64::from(params.issue_cost) + class_term
}

/// Costs an instruction sequence without validating it.
pub fn instructions_cost(instrs: &[Instruction], params: &CostParams, dim: u32) -> CostBreakdown {
    let mut out = CostBreakdown::default();
    for instr in instrs {
        let cost = instruction_cost(instr, params, dim);
        out.total += cost;
        out.per_instruction.push(cost);
        out.counts.bump(instr.class());
        match instr {
            Instruction::Mvin { cols, rows, .. } => out.dram_bytes_in += 4 * u64::from(*cols) * u64::from(*rows),
            Instruction::Mvout { cols, rows, .. } => out.dram_bytes_out += 4 * u64::from(*cols) * u64::from(*rows),
            _ => {}
        }
    }
    out
}

pub fn program_cost(p: &Program, params: &CostParams, cfg: &MachineConfig) -> Result<CostBreakdown, CostError> {
    let dim = cfg.dim as u32;
    p.validate(dim)?;
    Ok(instructions_cost(&p.instructions, params, dim))
}

fn signed(x: f64) -> String {
    // adding 0.0 turns -0 into +0
    format!("{:+}", x + 0.0)
}

/// Compact text summary suitable for an optimization prompt.
pub fn render_feedback(c: &CostBreakdown, baseline: Option<&CostBreakdown>) -> String {
    let n = &c.counts;
    let mut out = String::new();
    let _ = writeln!(out, "total: {}", c.total);
    let _ = writeln!(
        out,
        "instructions: {} (config {}, mvin {}, mvout {}, preload {}, compute {}, fence {})",
        n.total(),
        n.config,
        n.mvin,
        n.mvout,
        n.preload,
        n.compute,
        n.fence
    );
    let _ = writeln!(out, "dram bytes: in {}, out {}", c.dram_bytes_in, c.dram_bytes_out);
    if let Some(b) = baseline {
        let _ = writeln!(out, "Δtotal: {}", signed(c.total - b.total));
        let _ = writeln!(out, "Δinstructions: {}", signed(n.total() as f64 - b.counts.total() as f64));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::DramRef;
    use crate::isa::LocalAddr;

    #[test]
    fn formula_examples() {
        let p = CostParams::default();
        assert_eq!(instructions_cost(&[], &p, 4).total, 0.0);
        assert_eq!(instructions_cost(&[Instruction::Fence], &p, 4).total, 1.0);
        let mvin =
            Instruction::Mvin { channel: 0, dram: DramRef::new("A", 0), local: LocalAddr(0), cols: 12, rows: 4 };
        assert_eq!(instruction_cost(&mvin, &p, 4), 1.0 + 0.25 * 4.0 * 12.0 * 4.0);
        assert_eq!(instruction_cost(&Instruction::PreloadZeros { c_local: LocalAddr(0) }, &p, 4), 5.0);
    }

    #[test]
    fn feedback_delta() {
        let c = instructions_cost(&[Instruction::Fence], &CostParams::default(), 4);
        assert!(!render_feedback(&c, None).contains('Δ'));
        assert!(render_feedback(&c, Some(&c)).contains("Δtotal: +0\n"));
    }
}
