//! Accelerator instruction set.
//!
//! Programs are written in a small C subset made of macro calls such as
//! `mvin(A, A_sp_addr, 4, 4);`. [`parse_program`] folds all operand
//! arithmetic and unrolls loops, producing a straight-line [`Program`];
//! [`render_program`] prints one back in a form that re-parses to the same
//! value.

mod parse;
mod render;

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{check_syntax, parse_program, parse_program_checked, MAX_INSTRUCTIONS};
pub use render::{render_instruction, render_program};

/// Raw value used both for "weights already preloaded" and "no bias".
pub const SENTINEL_ADDR: u32 = 0xffff_ffff;

const SPACE_BIT: u32 = 1 << 31;
const ACCUMULATE_BIT: u32 = 1 << 30;
const FULL_WIDTH_BIT: u32 = 1 << 29;
const ROW_MASK: u32 = FULL_WIDTH_BIT - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Space {
    Scratchpad,
    Accumulator,
}

/// A 32-bit local memory address. Bit 31 selects the accumulator, bit 30
/// requests accumulate-on-write, bit 29 requests a raw full-width read and
/// bits 28..0 hold the row.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalAddr(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodedAddr {
    pub space: Space,
    pub accumulate_on_write: bool,
    pub read_full_width: bool,
    pub row: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("row {0} does not fit in 29 bits")]
pub struct RowOutOfRange(pub u64);

pub fn encode_local_addr(
    space: Space,
    accumulate_on_write: bool,
    read_full_width: bool,
    row: u64,
) -> Result<LocalAddr, RowOutOfRange> {
    if row > u64::from(ROW_MASK) {
        return Err(RowOutOfRange(row));
    }
    let mut raw = row as u32;
    if space == Space::Accumulator {
        raw |= SPACE_BIT;
    }
    if accumulate_on_write {
        raw |= ACCUMULATE_BIT;
    }
    if read_full_width {
        raw |= FULL_WIDTH_BIT;
    }
    Ok(LocalAddr(raw))
}

pub fn decode_local_addr(raw: u32) -> DecodedAddr {
    DecodedAddr {
        space: if raw & SPACE_BIT != 0 { Space::Accumulator } else { Space::Scratchpad },
        accumulate_on_write: raw & ACCUMULATE_BIT != 0,
        read_full_width: raw & FULL_WIDTH_BIT != 0,
        row: raw & ROW_MASK,
    }
}

impl LocalAddr {
    pub fn decode(self) -> DecodedAddr {
        decode_local_addr(self.0)
    }

    pub fn space(self) -> Space {
        self.decode().space
    }

    pub fn row(self) -> u32 {
        self.0 & ROW_MASK
    }

    pub fn accumulates(self) -> bool {
        self.0 & ACCUMULATE_BIT != 0
    }

    pub fn full_width(self) -> bool {
        self.0 & FULL_WIDTH_BIT != 0
    }

    pub fn is_accumulator(self) -> bool {
        self.0 & SPACE_BIT != 0
    }
}

impl fmt::Debug for LocalAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LocalAddr({:#010x})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataflow {
    OutputStationary,
    WeightStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    None,
    Relu,
    LayerNorm,
    IGelu,
    Softmax,
}

impl Dataflow {
    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Dataflow::OutputStationary),
            1 => Some(Dataflow::WeightStationary),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataflow::OutputStationary => "OUTPUT_STATIONARY",
            Dataflow::WeightStationary => "WEIGHT_STATIONARY",
        }
    }
}

impl Activation {
    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => Activation::None,
            1 => Activation::Relu,
            2 => Activation::LayerNorm,
            3 => Activation::IGelu,
            4 => Activation::Softmax,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "NO_ACTIVATION",
            Activation::Relu => "RELU",
            Activation::LayerNorm => "LAYERNORM",
            Activation::IGelu => "IGELU",
            Activation::Softmax => "SOFTMAX",
        }
    }
}

/// A DRAM operand: a declared buffer plus an offset in 4-byte elements.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DramRef {
    pub buffer: String,
    pub element_offset: u32,
}

impl DramRef {
    pub fn new(buffer: impl Into<String>, element_offset: u32) -> Self {
        DramRef { buffer: buffer.into(), element_offset }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    ConfigEx {
        dataflow: Dataflow,
        act: Activation,
        a_transpose: bool,
        b_transpose: bool,
    },
    ConfigLd {
        stride_bytes: u32,
        channel: u8,
    },
    ConfigSt {
        stride_bytes: u32,
    },
    Mvin {
        channel: u8,
        dram: DramRef,
        local: LocalAddr,
        cols: u32,
        rows: u32,
    },
    /// `b_local == None` means the weights already latched are kept.
    Preload {
        b_local: Option<LocalAddr>,
        c_local: LocalAddr,
        b_cols: u32,
        b_rows: u32,
        c_cols: u32,
        c_rows: u32,
    },
    PreloadZeros {
        c_local: LocalAddr,
    },
    /// `d_local == None` means no bias.
    ComputePreloaded(ComputeArgs),
    ComputeAccumulated(ComputeArgs),
    Mvout {
        dram: DramRef,
        local: LocalAddr,
        cols: u32,
        rows: u32,
    },
    Fence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComputeArgs {
    pub a_local: LocalAddr,
    pub d_local: Option<LocalAddr>,
    pub a_cols: u32,
    pub a_rows: u32,
    pub d_cols: u32,
    pub d_rows: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InstrClass {
    Config,
    Mvin,
    Mvout,
    Preload,
    Compute,
    Fence,
}

impl Instruction {
    pub fn class(&self) -> InstrClass {
        match self {
            Instruction::ConfigEx { .. } | Instruction::ConfigLd { .. } | Instruction::ConfigSt { .. } => {
                InstrClass::Config
            }
            Instruction::Mvin { .. } => InstrClass::Mvin,
            Instruction::Mvout { .. } => InstrClass::Mvout,
            Instruction::Preload { .. } | Instruction::PreloadZeros { .. } => InstrClass::Preload,
            Instruction::ComputePreloaded(_) | Instruction::ComputeAccumulated(_) => InstrClass::Compute,
            Instruction::Fence => InstrClass::Fence,
        }
    }

    /// Name of the macro this instruction is written with.
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::ConfigEx { .. } => "config_ex",
            Instruction::ConfigLd { .. } => "config_ld",
            Instruction::ConfigSt { .. } => "config_st",
            Instruction::Mvin { channel: 0, .. } => "mvin",
            Instruction::Mvin { channel: 1, .. } => "mvin2",
            Instruction::Mvin { .. } => "mvin3",
            Instruction::Preload { .. } => "preload",
            Instruction::PreloadZeros { .. } => "preload_zeros",
            Instruction::ComputePreloaded(_) => "compute_preloaded",
            Instruction::ComputeAccumulated(_) => "compute_accumulated",
            Instruction::Mvout { .. } => "mvout",
            Instruction::Fence => "fence",
        }
    }

    pub fn dram_ref(&self) -> Option<&DramRef> {
        match self {
            Instruction::Mvin { dram, .. } | Instruction::Mvout { dram, .. } => Some(dram),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferRole {
    Input,
    Output,
    Bias,
}

/// One entry of the externally supplied buffer table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferDecl {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: BufferRole,
}

impl BufferDecl {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, role: BufferRole) -> Self {
        BufferDecl { name: name.into(), rows, cols, role }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub type BufferTable = IndexMap<String, BufferDecl>;

pub fn buffer_table(decls: impl IntoIterator<Item = BufferDecl>) -> BufferTable {
    decls.into_iter().map(|d| (d.name.clone(), d)).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Program {
    pub buffers: BufferTable,
    pub symbols: IndexMap<String, u32>,
    pub instructions: Vec<Instruction>,
}

impl Program {
    pub fn new(buffers: BufferTable, instructions: Vec<Instruction>) -> Self {
        Program { buffers, symbols: IndexMap::new(), instructions }
    }

    /// Static checks that only need DIM: mvin/mvout row counts.
    pub fn validate(&self, dim: u32) -> Result<(), IsaError> {
        for (index, instr) in self.instructions.iter().enumerate() {
            if let Some(dram) = instr.dram_ref() {
                if !self.buffers.contains_key(&dram.buffer) {
                    return Err(IsaError::UnknownBuffer(dram.buffer.clone()));
                }
            }
            match instr {
                Instruction::Mvin { rows, .. } | Instruction::Mvout { rows, .. } if *rows > dim => {
                    return Err(IsaError::RowsExceedDim { index, rows: *rows, dim });
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Same program with a different instruction list.
    pub fn with_instructions(&self, instructions: Vec<Instruction>) -> Program {
        Program { buffers: self.buffers.clone(), symbols: self.symbols.clone(), instructions }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("syntax error on line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("unbound symbol `{0}`")]
    UnboundSymbol(String),
    #[error("loop bound or step is not a compile-time constant: {0}")]
    NonConstantLoopBound(String),
    #[error("instruction {index}: {rows} rows exceeds DIM={dim}")]
    RowsExceedDim { index: usize, rows: u32, dim: u32 },
    #[error("unknown buffer `{0}`")]
    UnknownBuffer(String),
    #[error("program unrolls to more than {0} instructions")]
    ProgramTooLarge(usize),
}

impl IsaError {
    pub(crate) fn syntax(line: usize, reason: impl Into<String>) -> Self {
        IsaError::Syntax { line, reason: reason.into() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode_local_addr(Space::Scratchpad, false, false, 12).unwrap().0, 0x0000_000C);
        assert_eq!(encode_local_addr(Space::Accumulator, true, false, 0).unwrap().0, 0xC000_0000);
        // bit composition: 1<<31 | 0<<30 | 1<<29 | 5
        let expected = (1u32 << 31) | (1 << 29) | 5;
        assert_eq!(expected, 0xA000_0005);
        assert_eq!(encode_local_addr(Space::Accumulator, false, true, 5).unwrap().0, expected);
    }

    #[test]
    fn encode_rejects_wide_rows() {
        assert_eq!(
            encode_local_addr(Space::Scratchpad, false, false, 1 << 29),
            Err(RowOutOfRange(1 << 29))
        );
    }

    #[test]
    fn decode_examples() {
        let d = decode_local_addr(0);
        assert_eq!(d.space, Space::Scratchpad);
        assert_eq!(d.row, 0);
        let d = decode_local_addr(0x8000_0004);
        assert_eq!(
            d,
            DecodedAddr { space: Space::Accumulator, accumulate_on_write: false, read_full_width: false, row: 4 }
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn encode_decode_roundtrip(raw in any::<u32>()) {
            let d = decode_local_addr(raw);
            let back = encode_local_addr(d.space, d.accumulate_on_write, d.read_full_width, u64::from(d.row)).unwrap();
            prop_assert_eq!(back.0, raw);
        }
    }

    #[test]
    fn validate_rejects_tall_mvin() {
        let buffers = buffer_table([BufferDecl::new("A", 8, 4, BufferRole::Input)]);
        let p = Program::new(
            buffers,
            vec![Instruction::Fence, Instruction::Mvin {
                channel: 0,
                dram: DramRef::new("A", 0),
                local: LocalAddr(0),
                cols: 4,
                rows: 5,
            }],
        );
        assert_eq!(p.validate(4), Err(IsaError::RowsExceedDim { index: 1, rows: 5, dim: 4 }));
        assert!(p.validate(8).is_ok());
    }
}
