//! Streaming redundancy elimination.
//!
//! Rules, applied in one pass:
//! (a) a preload whose effective weights, output address and dims equal the
//!     previous surviving preload is dropped;
//! (b) an mvin equal to a still-valid earlier mvin (same stride, destination
//!     rows and DRAM source unwritten since) is dropped;
//! (c) a preload reloading the weights that are still latched from the same
//!     scratchpad rows reuses them with KEEP.
//! Computes are never removed.

use super::{Block, Region, Tracker};
use crate::isa::{Instruction, LocalAddr};

#[derive(Debug, Clone, PartialEq)]
enum WeightSource {
    Zeros,
    Rows { addr: LocalAddr, cols: u32, rows: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct PreloadKey {
    weights: WeightSource,
    c: LocalAddr,
    dims: [u32; 4],
}

#[derive(Debug, Clone)]
struct LiveMvin {
    instr: Instruction,
    stride: u32,
    local: Region,
    source: Region,
}

/// Pass state; feed instructions in program order with [`Peephole::push`].
#[derive(Debug, Clone)]
pub struct Peephole {
    dim: u32,
    ld_stride_bytes: [u32; 3],
    st_stride_bytes: u32,
    ex: Option<Instruction>,
    /// Weights latched for KEEP, while their source rows are unchanged.
    weights: Option<WeightSource>,
    last_preload: Option<PreloadKey>,
    latch_c: Option<(LocalAddr, u32)>,
    live: Vec<LiveMvin>,
}

impl Peephole {
    pub fn new(dim: u32) -> Self {
        Peephole {
            dim,
            ld_stride_bytes: [0; 3],
            st_stride_bytes: 0,
            ex: None,
            weights: None,
            last_preload: None,
            latch_c: None,
            live: Vec::new(),
        }
    }

    fn clobber(&mut self, written: &Region) {
        self.live.retain(|m| !m.local.overlaps(written) && !m.source.overlaps(written));
        if let Some(WeightSource::Rows { addr, rows, .. }) = &self.weights {
            let src = Region::local(*addr, 0..u64::from(*rows));
            if src.overlaps(written) {
                self.weights = None;
                self.last_preload = None;
            }
        }
    }

    /// Returns the instruction to keep, possibly rewritten, or `None` when it
    /// is redundant.
    pub fn push(&mut self, instr: &Instruction) -> Option<Instruction> {
        match instr {
            Instruction::ConfigEx { .. } => {
                if self.ex.as_ref() != Some(instr) {
                    self.weights = None;
                    self.last_preload = None;
                }
                self.ex = Some(instr.clone());
                Some(instr.clone())
            }
            Instruction::ConfigLd { stride_bytes, channel } => {
                self.ld_stride_bytes[usize::from(*channel).min(2)] = *stride_bytes;
                Some(instr.clone())
            }
            Instruction::ConfigSt { stride_bytes } => {
                self.st_stride_bytes = *stride_bytes;
                Some(instr.clone())
            }
            Instruction::Mvin { channel, dram, local, cols, rows } => {
                let stride = self.ld_stride_bytes[usize::from(*channel).min(2)];
                let accumulating = local.is_accumulator() && local.accumulates();
                if !accumulating && self.live.iter().any(|m| m.instr == *instr && m.stride == stride) {
                    return None;
                }
                let dest = Tracker::local_rows(*local, *cols, *rows, self.dim);
                self.clobber(&dest);
                if !accumulating {
                    let source = Tracker::dram_elements(&dram.buffer, dram.element_offset, *cols, *rows, stride);
                    self.live.push(LiveMvin { instr: instr.clone(), stride, local: dest, source });
                }
                Some(instr.clone())
            }
            Instruction::Mvout { dram, cols, rows, .. } => {
                let written =
                    Tracker::dram_elements(&dram.buffer, dram.element_offset, *cols, *rows, self.st_stride_bytes);
                self.clobber(&written);
                Some(instr.clone())
            }
            Instruction::Preload { b_local, c_local, b_cols, b_rows, c_cols, c_rows } => {
                let dims = [*b_cols, *b_rows, *c_cols, *c_rows];
                let source = match b_local {
                    Some(addr) => Some(WeightSource::Rows { addr: *addr, cols: *b_cols, rows: *b_rows }),
                    None => self.weights.clone(),
                };
                self.latch_c = Some((*c_local, *c_rows));
                let Some(source) = source else {
                    // KEEP of weights we no longer track
                    self.last_preload = None;
                    return Some(instr.clone());
                };
                let key = PreloadKey { weights: source.clone(), c: *c_local, dims };
                if self.last_preload.as_ref() == Some(&key) {
                    return None;
                }
                let out = if b_local.is_some() && self.weights.as_ref() == Some(&source) {
                    Instruction::Preload {
                        b_local: None,
                        c_local: *c_local,
                        b_cols: *b_cols,
                        b_rows: *b_rows,
                        c_cols: *c_cols,
                        c_rows: *c_rows,
                    }
                } else {
                    instr.clone()
                };
                self.weights = Some(source);
                self.last_preload = Some(key);
                Some(out)
            }
            Instruction::PreloadZeros { c_local } => {
                let key = PreloadKey { weights: WeightSource::Zeros, c: *c_local, dims: [self.dim; 4] };
                self.latch_c = Some((*c_local, self.dim));
                if self.last_preload.as_ref() == Some(&key) {
                    return None;
                }
                self.weights = Some(WeightSource::Zeros);
                self.last_preload = Some(key);
                Some(instr.clone())
            }
            Instruction::ComputePreloaded(_) | Instruction::ComputeAccumulated(_) => {
                if let Some((c, rows)) = self.latch_c {
                    self.clobber(&Region::local(c, 0..u64::from(rows)));
                }
                Some(instr.clone())
            }
            Instruction::Fence => Some(instr.clone()),
        }
    }
}

/// Runs the pass over a whole sequence from an empty state.
pub fn peephole_instructions(instrs: &[Instruction], dim: u32) -> Vec<Instruction> {
    let mut pass = Peephole::new(dim);
    instrs.iter().filter_map(|i| pass.push(i)).collect()
}

/// Applies the rules inside one block, starting from `context` (the state
/// left by the blocks before it), which is advanced past the block.
pub fn peephole_block(b: &Block, context: &mut Peephole) -> Block {
    let instructions = b.instructions.iter().filter_map(|i| context.push(i)).collect();
    Block { id: b.id, instructions, footprint: b.footprint.clone() }
}
