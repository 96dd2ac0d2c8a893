//! Block-level optimization of straight-line programs: segmentation into
//! preload/compute blocks, dependence analysis over memory and register
//! footprints, peephole rewrites, and block ordering search.

mod order;
mod peephole;
mod pipeline;

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{Instruction, IsaError, LocalAddr, Program, Space};
use crate::llm::LlmError;
use crate::prompt::PromptError;

pub use order::{check_plan, ordered_cost, parse_plan, reassemble, search_reorder, OrderingPlan, PlanSource};
pub use peephole::{peephole_block, peephole_instructions, Peephole};
pub use pipeline::{optimize_program, OptimizeMode, OptimizeResult};

/// Orderings up to this many blocks are searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 8;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("invalid program: {0}")]
    Validation(#[from] IsaError),
    #[error("dependence edges contain a cycle")]
    CyclicDependence,
    #[error("plan is not usable: {0}")]
    BadPlan(String),
    #[error("mode requires a completion backend")]
    NoBackend,
    #[error("input program does not pass verification")]
    UnverifiedInput,
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Architectural state an instruction may depend on besides memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reg {
    /// `config_ex` state: dataflow, activation, transposes.
    Ex,
    Ld(u8),
    St,
    /// Weights available for a KEEP preload.
    Weights,
    /// Latched output address and weights used by computes.
    Latch,
    /// Ordering token written by fences.
    Order,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Spad(Range<u64>),
    Acc(Range<u64>),
    Dram { buffer: String, elements: Range<u64> },
}

fn overlap(a: &Range<u64>, b: &Range<u64>) -> bool {
    a.start < b.end && b.start < a.end
}

impl Region {
    pub fn overlaps(&self, other: &Region) -> bool {
        match (self, other) {
            (Region::Spad(a), Region::Spad(b)) | (Region::Acc(a), Region::Acc(b)) => overlap(a, b),
            (Region::Dram { buffer: x, elements: a }, Region::Dram { buffer: y, elements: b }) => {
                x == y && overlap(a, b)
            }
            _ => false,
        }
    }

    fn local(addr: LocalAddr, rows: Range<u64>) -> Region {
        let base = u64::from(addr.row());
        let range = base + rows.start..base + rows.end;
        match addr.space() {
            Space::Scratchpad => Region::Spad(range),
            Space::Accumulator => Region::Acc(range),
        }
    }
}

/// Memory regions and registers touched by a block. Register reads are only
/// those not preceded by a write of the same register inside the block.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub reads: Vec<Region>,
    pub writes: Vec<Region>,
    pub reg_reads: BTreeSet<Reg>,
    pub reg_writes: BTreeSet<Reg>,
}

impl Footprint {
    fn read_reg(&mut self, r: Reg) {
        if !self.reg_writes.contains(&r) {
            self.reg_reads.insert(r);
        }
    }

    fn conflicts(&self, later: &Footprint) -> bool {
        let any = |xs: &[Region], ys: &[Region]| xs.iter().any(|x| ys.iter().any(|y| x.overlaps(y)));
        any(&self.writes, &later.reads) || any(&self.reads, &later.writes) || any(&self.writes, &later.writes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: usize,
    pub instructions: Vec<Instruction>,
    pub footprint: Footprint,
}

/// Register values needed to resolve footprints, tracked in program order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Tracker {
    pub ld_stride_bytes: [u32; 3],
    pub st_stride_bytes: u32,
    pub latch_c: Option<(LocalAddr, u32)>,
}

impl Tracker {
    /// Local rows touched by a move of `cols` x `rows` starting at `addr`.
    pub fn local_rows(addr: LocalAddr, cols: u32, rows: u32, dim: u32) -> Region {
        let tiles = cols.div_ceil(dim).max(1);
        Region::local(addr, 0..u64::from((tiles - 1) * dim + rows))
    }

    /// DRAM elements touched by a move of `cols` x `rows` at `stride_bytes`.
    pub fn dram_elements(buffer: &str, offset: u32, cols: u32, rows: u32, stride_bytes: u32) -> Region {
        let stride = u64::from(stride_bytes / 4);
        let start = u64::from(offset);
        let end = start + u64::from(rows.saturating_sub(1)) * stride + u64::from(cols);
        Region::Dram { buffer: buffer.to_string(), elements: start..end }
    }

    /// Adds the effects of `instr` to `fp` and advances the tracked state.
    pub fn visit(&mut self, instr: &Instruction, dim: u32, fp: &mut Footprint) {
        if !matches!(instr, Instruction::Fence) {
            fp.read_reg(Reg::Order);
        }
        match instr {
            Instruction::ConfigEx { .. } => {
                fp.reg_writes.insert(Reg::Ex);
            }
            Instruction::ConfigLd { stride_bytes, channel } => {
                self.ld_stride_bytes[usize::from(*channel).min(2)] = *stride_bytes;
                fp.reg_writes.insert(Reg::Ld(*channel));
            }
            Instruction::ConfigSt { stride_bytes } => {
                self.st_stride_bytes = *stride_bytes;
                fp.reg_writes.insert(Reg::St);
            }
            Instruction::Mvin { channel, dram, local, cols, rows } => {
                fp.read_reg(Reg::Ld(*channel));
                let stride = self.ld_stride_bytes[usize::from(*channel).min(2)];
                fp.reads.push(Self::dram_elements(&dram.buffer, dram.element_offset, *cols, *rows, stride));
                let dest = Self::local_rows(*local, *cols, *rows, dim);
                if local.is_accumulator() && local.accumulates() {
                    fp.reads.push(dest.clone());
                }
                fp.writes.push(dest);
            }
            Instruction::Mvout { dram, local, cols, rows } => {
                fp.read_reg(Reg::St);
                fp.read_reg(Reg::Ex);
                fp.reads.push(Self::local_rows(*local, *cols, *rows, dim));
                fp.writes.push(Self::dram_elements(&dram.buffer, dram.element_offset, *cols, *rows, self.st_stride_bytes));
            }
            Instruction::Preload { b_local, c_local, b_rows, c_rows, .. } => {
                match b_local {
                    Some(b) => {
                        fp.read_reg(Reg::Ex);
                        fp.reads.push(Region::local(*b, 0..u64::from(*b_rows)));
                        fp.reg_writes.insert(Reg::Weights);
                    }
                    None => fp.read_reg(Reg::Weights),
                }
                fp.reg_writes.insert(Reg::Latch);
                self.latch_c = Some((*c_local, *c_rows));
            }
            Instruction::PreloadZeros { c_local } => {
                fp.reg_writes.insert(Reg::Weights);
                fp.reg_writes.insert(Reg::Latch);
                self.latch_c = Some((*c_local, dim));
            }
            Instruction::ComputePreloaded(args) | Instruction::ComputeAccumulated(args) => {
                fp.read_reg(Reg::Latch);
                fp.read_reg(Reg::Ex);
                fp.reads.push(Region::local(args.a_local, 0..u64::from(args.a_rows)));
                if let Some(d) = args.d_local {
                    fp.reads.push(Region::local(d, 0..u64::from(args.d_rows)));
                }
                if let Some((c, rows)) = self.latch_c {
                    let out = Region::local(c, 0..u64::from(rows));
                    if c.accumulates() || matches!(instr, Instruction::ComputeAccumulated(_)) {
                        fp.reads.push(out.clone());
                    }
                    fp.writes.push(out);
                }
            }
            Instruction::Fence => {
                fp.reg_writes.insert(Reg::Order);
            }
        }
    }
}

/// Recomputes every block's footprint, walking blocks in id order.
pub fn compute_footprints(blocks: &mut [Block], dim: u32) {
    let mut tracker = Tracker::default();
    for b in blocks.iter_mut() {
        let mut fp = Footprint::default();
        for instr in &b.instructions {
            tracker.visit(instr, dim, &mut fp);
        }
        b.footprint = fp;
    }
}

fn is_config(i: &Instruction) -> bool {
    matches!(i, Instruction::ConfigEx { .. } | Instruction::ConfigLd { .. } | Instruction::ConfigSt { .. })
}

/// Splits a program into contiguous blocks. Leading configuration
/// instructions form a prelude. Every other block is the run of moves and
/// configuration leading into a preload, the preload, its computes, and the
/// mvouts and fences that follow before the next lead-in.
pub fn segment_blocks(p: &Program, dim: u32) -> Result<Vec<Block>, OptError> {
    p.validate(dim)?;
    let mut groups: Vec<Vec<Instruction>> = Vec::new();
    let mut iter = p.instructions.iter().peekable();
    let mut prelude = Vec::new();
    while let Some(i) = iter.next_if(|i| is_config(i)) {
        prelude.push(i.clone());
    }
    if !prelude.is_empty() {
        groups.push(prelude);
    }
    let mut current: Vec<Instruction> = Vec::new();
    let mut has_compute = false;
    for instr in iter {
        let opens = matches!(
            instr,
            Instruction::Mvin { .. } | Instruction::Preload { .. } | Instruction::PreloadZeros { .. }
        ) || is_config(instr);
        if opens && has_compute {
            groups.push(std::mem::take(&mut current));
            has_compute = false;
        }
        if matches!(instr, Instruction::ComputePreloaded(_) | Instruction::ComputeAccumulated(_)) {
            has_compute = true;
        }
        current.push(instr.clone());
    }
    if !current.is_empty() {
        groups.push(current);
    }
    let mut blocks: Vec<Block> = groups
        .into_iter()
        .enumerate()
        .map(|(id, instructions)| Block { id, instructions, footprint: Footprint::default() })
        .collect();
    compute_footprints(&mut blocks, dim);
    Ok(blocks)
}

pub type Edges = BTreeSet<(usize, usize)>;

/// Edges `a → b` meaning block `a` must stay before block `b`. Memory
/// conflicts (RAW, WAR, WAW on overlapping intervals) are checked pairwise.
/// Registers use reaching writers: a block reading a register stays after
/// the writer it reads from, and every other writer stays outside that span.
pub fn analyze_dependences(blocks: &[Block]) -> Edges {
    let mut edges = Edges::new();
    for (i, a) in blocks.iter().enumerate() {
        for (j, b) in blocks.iter().enumerate().skip(i + 1) {
            if a.footprint.conflicts(&b.footprint) {
                edges.insert((i, j));
            }
        }
    }
    let regs: BTreeSet<Reg> =
        blocks.iter().flat_map(|b| b.footprint.reg_reads.iter().chain(&b.footprint.reg_writes)).copied().collect();
    for reg in regs {
        let writers: Vec<usize> =
            blocks.iter().enumerate().filter(|(_, b)| b.footprint.reg_writes.contains(&reg)).map(|(i, _)| i).collect();
        for (r, block) in blocks.iter().enumerate() {
            if !block.footprint.reg_reads.contains(&reg) {
                continue;
            }
            let reaching = writers.iter().copied().filter(|&w| w < r).max();
            if let Some(d) = reaching {
                edges.insert((d, r));
                for &w in writers.iter().filter(|&&w| w < d) {
                    edges.insert((w, d));
                }
            }
            for &w in writers.iter().filter(|&&w| w > r) {
                edges.insert((r, w));
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::fixture;

    #[test]
    fn gv1_has_prelude_and_three_blocks() {
        let f = fixture("gv1").unwrap();
        let p = f.golden_program(4);
        let blocks = segment_blocks(&p, 4).unwrap();
        assert_eq!(blocks.len(), 4);
        assert!(blocks[0].instructions.iter().all(is_config));
        let joined: Vec<Instruction> = blocks.iter().flat_map(|b| b.instructions.clone()).collect();
        assert_eq!(joined, p.instructions);
    }

    #[test]
    fn config_only_and_empty() {
        let p = Program::new(Default::default(), vec![Instruction::ConfigSt { stride_bytes: 16 }]);
        assert_eq!(segment_blocks(&p, 4).unwrap().len(), 1);
        assert!(segment_blocks(&Program::new(Default::default(), vec![]), 4).unwrap().is_empty());
    }
}
