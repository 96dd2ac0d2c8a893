//! Functional simulator for the accelerator ISA.
//!
//! Memories are modeled as flat `f32` arrays: the scratchpad and accumulator
//! are `rows × dim` grids and each DRAM buffer is a row-major matrix. Reads of
//! never-written local memory return zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{
    Activation, BufferTable, ComputeArgs, Dataflow, DramRef, Instruction, LocalAddr, Program, Space,
};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MachineConfig {
    pub dim: usize,
    pub spad_rows: usize,
    pub acc_rows: usize,
    /// Maximum number of `dim`-wide column tiles a single mvin/mvout may move.
    pub max_block_len: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig { dim: 4, spad_rows: 1024, acc_rows: 256, max_block_len: 4 }
    }
}

impl MachineConfig {
    pub fn check(&self) -> Result<(), SimError> {
        if self.dim == 0 {
            return Err(SimError::ConfigInvalid("dim must be at least 1".into()));
        }
        if self.spad_rows < self.dim || self.acc_rows < self.dim {
            return Err(SimError::ConfigInvalid(format!(
                "spad_rows ({}) and acc_rows ({}) must be at least dim ({})",
                self.spad_rows, self.acc_rows, self.dim
            )));
        }
        if self.max_block_len == 0 {
            return Err(SimError::ConfigInvalid("max_block_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecErrorKind {
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("rows {rows} exceeds DIM {dim}")]
    RowsExceedDim { rows: u32, dim: usize },
    #[error("cols {cols} exceeds the block limit {max}")]
    BlockTooWide { cols: u32, max: usize },
    #[error("scratchpad row {0} out of range")]
    SpadOutOfRange(u64),
    #[error("accumulator row {0} out of range")]
    AccOutOfRange(u64),
    #[error("element {element} of `{buffer}` out of range")]
    DramOutOfRange { buffer: String, element: u64 },
    #[error("compute issued before any preload")]
    ComputeBeforePreload,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("wrong address space: {0}")]
    WrongAddressSpace(String),
    #[error("unknown buffer `{0}`")]
    UnknownBuffer(String),
}

impl ExecErrorKind {
    /// Short stable name, used in verdicts and reports.
    pub fn name(&self) -> &'static str {
        match self {
            ExecErrorKind::Unsupported(_) => "Unsupported",
            ExecErrorKind::RowsExceedDim { .. } => "RowsExceedDim",
            ExecErrorKind::BlockTooWide { .. } => "BlockTooWide",
            ExecErrorKind::SpadOutOfRange(_) => "SpadOutOfRange",
            ExecErrorKind::AccOutOfRange(_) => "AccOutOfRange",
            ExecErrorKind::DramOutOfRange { .. } => "DramOutOfRange",
            ExecErrorKind::ComputeBeforePreload => "ComputeBeforePreload",
            ExecErrorKind::DimensionMismatch(_) => "DimensionMismatch",
            ExecErrorKind::WrongAddressSpace(_) => "WrongAddressSpace",
            ExecErrorKind::UnknownBuffer(_) => "UnknownBuffer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid machine config: {0}")]
    ConfigInvalid(String),
    #[error("buffer `{buffer}` has shape {got:?}, declared {expected:?}")]
    ShapeMismatch { buffer: String, expected: (usize, usize), got: (usize, usize) },
    #[error("unknown buffer `{0}`")]
    UnknownBuffer(String),
    #[error("instruction {index}: {kind}")]
    Exec { index: usize, kind: ExecErrorKind },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registers {
    /// `None` until the first `config_ex`; treated as weight-stationary.
    pub dataflow: Option<Dataflow>,
    pub act: Activation,
    pub a_transpose: bool,
    pub b_transpose: bool,
    pub ld_stride_bytes: [u32; 3],
    pub st_stride_bytes: u32,
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    Zeros,
    Block(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
struct Latched {
    weights: Option<Weights>,
    c_addr: LocalAddr,
    c_cols: usize,
    c_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Machine {
    pub config: MachineConfig,
    dram: BTreeMap<String, Matrix>,
    spad: Vec<f32>,
    acc: Vec<f32>,
    pub regs: Registers,
    latched: Option<Latched>,
    last_weights: Option<Weights>,
    /// Bytes moved DRAM → local memory by mvin.
    pub bytes_in: u64,
    /// Bytes moved accumulator → DRAM by mvout.
    pub bytes_out: u64,
}

type Step<T> = Result<T, ExecErrorKind>;

impl Machine {
    /// Creates a machine with the given DRAM contents. Every memory starts
    /// zeroed and no weights are latched.
    pub fn new(config: MachineConfig, buffers: impl IntoIterator<Item = (String, Matrix)>) -> Result<Self, SimError> {
        config.check()?;
        Ok(Machine {
            config,
            dram: buffers.into_iter().collect(),
            spad: vec![0.0; config.spad_rows * config.dim],
            acc: vec![0.0; config.acc_rows * config.dim],
            regs: Registers::default(),
            latched: None,
            last_weights: None,
            bytes_in: 0,
            bytes_out: 0,
        })
    }

    /// Binds every declared buffer: entries in `contents` must match the
    /// declared shape, missing ones start as zero matrices.
    pub fn with_buffers(
        config: MachineConfig,
        decls: &BufferTable,
        contents: &BTreeMap<String, Matrix>,
    ) -> Result<Self, SimError> {
        let mut dram = Vec::new();
        for (name, decl) in decls {
            let m = match contents.get(name) {
                Some(m) => {
                    if m.shape() != (decl.rows, decl.cols) {
                        return Err(SimError::ShapeMismatch {
                            buffer: name.clone(),
                            expected: (decl.rows, decl.cols),
                            got: m.shape(),
                        });
                    }
                    m.clone()
                }
                None => Matrix::zeros(decl.rows, decl.cols),
            };
            dram.push((name.clone(), m));
        }
        for name in contents.keys() {
            if !decls.contains_key(name) {
                return Err(SimError::UnknownBuffer(name.clone()));
            }
        }
        Machine::new(config, dram)
    }

    pub fn read_output(&self, buffer: &str) -> Result<Matrix, SimError> {
        self.dram.get(buffer).cloned().ok_or_else(|| SimError::UnknownBuffer(buffer.to_string()))
    }

    pub fn dram(&self) -> &BTreeMap<String, Matrix> {
        &self.dram
    }

    /// Row `row` of the scratchpad.
    pub fn spad_row(&self, row: usize) -> &[f32] {
        let d = self.config.dim;
        &self.spad[row * d..(row + 1) * d]
    }

    /// Row `row` of the accumulator.
    pub fn acc_row(&self, row: usize) -> &[f32] {
        let d = self.config.dim;
        &self.acc[row * d..(row + 1) * d]
    }

    /// Runs every instruction of `p` in order, stopping at the first error.
    pub fn execute(&mut self, p: &Program) -> Result<(), SimError> {
        for (index, instr) in p.instructions.iter().enumerate() {
            self.step(instr).map_err(|kind| SimError::Exec { index, kind })?;
        }
        Ok(())
    }

    /// Executes a single instruction.
    pub fn step(&mut self, instr: &Instruction) -> Step<()> {
        match instr {
            Instruction::ConfigEx { dataflow, act, a_transpose, b_transpose } => {
                if *dataflow == Dataflow::OutputStationary {
                    return Err(ExecErrorKind::Unsupported("OUTPUT_STATIONARY dataflow".into()));
                }
                if !matches!(act, Activation::None | Activation::Relu) {
                    return Err(ExecErrorKind::Unsupported(format!("{} activation", act.name())));
                }
                self.regs.dataflow = Some(*dataflow);
                self.regs.act = *act;
                self.regs.a_transpose = *a_transpose;
                self.regs.b_transpose = *b_transpose;
            }
            Instruction::ConfigLd { stride_bytes, channel } => {
                self.regs.ld_stride_bytes[usize::from(*channel).min(2)] = *stride_bytes;
            }
            Instruction::ConfigSt { stride_bytes } => self.regs.st_stride_bytes = *stride_bytes,
            Instruction::Mvin { channel, dram, local, cols, rows } => {
                let stride = self.regs.ld_stride_bytes[usize::from(*channel).min(2)];
                self.mvin(dram, *local, *cols, *rows, stride)?;
            }
            Instruction::Mvout { dram, local, cols, rows } => self.mvout(dram, *local, *cols, *rows)?,
            Instruction::Preload { b_local, c_local, b_cols, b_rows, c_cols, c_rows } => {
                self.preload(*b_local, *c_local, [*b_cols, *b_rows, *c_cols, *c_rows])?;
            }
            Instruction::PreloadZeros { c_local } => {
                if !c_local.is_accumulator() {
                    return Err(ExecErrorKind::WrongAddressSpace("preload output must address the accumulator".into()));
                }
                self.last_weights = Some(Weights::Zeros);
                self.latched = Some(Latched {
                    weights: Some(Weights::Zeros),
                    c_addr: *c_local,
                    c_cols: self.config.dim,
                    c_rows: self.config.dim,
                });
            }
            Instruction::ComputePreloaded(args) => self.compute(args, false)?,
            Instruction::ComputeAccumulated(args) => self.compute(args, true)?,
            Instruction::Fence => {}
        }
        Ok(())
    }

    fn stride_elems(stride_bytes: u32) -> Step<usize> {
        if !stride_bytes.is_multiple_of(4) {
            return Err(ExecErrorKind::Unsupported(format!("stride of {stride_bytes} bytes is not a whole element")));
        }
        Ok((stride_bytes / 4) as usize)
    }

    fn check_block(&self, cols: u32, rows: u32) -> Step<()> {
        let dim = self.config.dim;
        if rows as usize > dim {
            return Err(ExecErrorKind::RowsExceedDim { rows, dim });
        }
        let max = dim * self.config.max_block_len;
        if cols as usize > max {
            return Err(ExecErrorKind::BlockTooWide { cols, max });
        }
        Ok(())
    }

    fn dram_index(&self, dram: &DramRef, element: usize) -> Step<usize> {
        let m = self.dram.get(&dram.buffer).ok_or_else(|| ExecErrorKind::UnknownBuffer(dram.buffer.clone()))?;
        if element >= m.data.len() {
            return Err(ExecErrorKind::DramOutOfRange { buffer: dram.buffer.clone(), element: element as u64 });
        }
        Ok(element)
    }

    fn local_cell(&self, addr_row: u64, space: Space, col: usize) -> Step<usize> {
        let dim = self.config.dim;
        match space {
            Space::Scratchpad if addr_row >= self.config.spad_rows as u64 => Err(ExecErrorKind::SpadOutOfRange(addr_row)),
            Space::Accumulator if addr_row >= self.config.acc_rows as u64 => Err(ExecErrorKind::AccOutOfRange(addr_row)),
            _ => Ok(addr_row as usize * dim + col),
        }
    }

    fn read_local(&self, space: Space, row: u64, col: usize) -> Step<f32> {
        let i = self.local_cell(row, space, col)?;
        Ok(match space {
            Space::Scratchpad => self.spad[i],
            Space::Accumulator => self.acc[i],
        })
    }

    /// Column tiles of a `cols`-wide transfer: `(tile index, width)`.
    fn tiles(&self, cols: u32) -> impl Iterator<Item = (usize, usize)> {
        let dim = self.config.dim;
        let cols = cols as usize;
        (0..cols.div_ceil(dim)).map(move |t| (t, dim.min(cols - t * dim)))
    }

    fn mvin(&mut self, dram: &DramRef, local: LocalAddr, cols: u32, rows: u32, stride_bytes: u32) -> Step<()> {
        self.check_block(cols, rows)?;
        let stride = Self::stride_elems(stride_bytes)?;
        let dim = self.config.dim;
        let space = local.space();
        let accumulate = space == Space::Accumulator && local.accumulates();
        let tiles: Vec<_> = self.tiles(cols).collect();
        for (t, width) in tiles {
            for r in 0..rows as usize {
                let dest_row = u64::from(local.row()) + (t * dim + r) as u64;
                for c in 0..width {
                    let src = self.dram_index(dram, dram.element_offset as usize + r * stride + t * dim + c)?;
                    let value = self.dram[&dram.buffer].data[src];
                    let cell = self.local_cell(dest_row, space, c)?;
                    let mem = match space {
                        Space::Scratchpad => &mut self.spad,
                        Space::Accumulator => &mut self.acc,
                    };
                    if accumulate {
                        mem[cell] += value;
                    } else {
                        mem[cell] = value;
                    }
                }
            }
        }
        self.bytes_in += 4 * u64::from(cols) * u64::from(rows);
        Ok(())
    }

    fn mvout(&mut self, dram: &DramRef, local: LocalAddr, cols: u32, rows: u32) -> Step<()> {
        self.check_block(cols, rows)?;
        if !local.is_accumulator() {
            return Err(ExecErrorKind::WrongAddressSpace("mvout must read from the accumulator".into()));
        }
        let stride = Self::stride_elems(self.regs.st_stride_bytes)?;
        let dim = self.config.dim;
        let relu = !local.full_width() && self.regs.act == Activation::Relu;
        let tiles: Vec<_> = self.tiles(cols).collect();
        for (t, width) in tiles {
            for r in 0..rows as usize {
                let src_row = u64::from(local.row()) + (t * dim + r) as u64;
                for c in 0..width {
                    let mut value = self.read_local(Space::Accumulator, src_row, c)?;
                    if relu && value < 0.0 {
                        value = 0.0;
                    }
                    let dst = self.dram_index(dram, dram.element_offset as usize + r * stride + t * dim + c)?;
                    if let Some(m) = self.dram.get_mut(&dram.buffer) {
                        m.data[dst] = value;
                    }
                }
            }
        }
        self.bytes_out += 4 * u64::from(cols) * u64::from(rows);
        Ok(())
    }

    fn read_block(&self, addr: LocalAddr, rows: usize, cols: usize) -> Step<Matrix> {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, self.read_local(addr.space(), u64::from(addr.row()) + r as u64, c)?);
            }
        }
        Ok(m)
    }

    fn check_dims(&self, what: &str, values: &[(&str, u32)]) -> Step<()> {
        for (name, v) in values {
            if *v as usize > self.config.dim {
                return Err(ExecErrorKind::DimensionMismatch(format!(
                    "{what} {name} = {v} exceeds DIM {}",
                    self.config.dim
                )));
            }
        }
        Ok(())
    }

    fn preload(&mut self, b: Option<LocalAddr>, c: LocalAddr, dims: [u32; 4]) -> Step<()> {
        let [b_cols, b_rows, c_cols, c_rows] = dims;
        self.check_dims("preload", &[("B_cols", b_cols), ("B_rows", b_rows), ("C_cols", c_cols), ("C_rows", c_rows)])?;
        if !c.is_accumulator() {
            return Err(ExecErrorKind::WrongAddressSpace("preload output must address the accumulator".into()));
        }
        let weights = match b {
            Some(b) => {
                if b.is_accumulator() {
                    return Err(ExecErrorKind::WrongAddressSpace("preload weights must come from the scratchpad".into()));
                }
                let block = self.read_block(b, b_rows as usize, b_cols as usize)?;
                let w = Weights::Block(if self.regs.b_transpose { block.transpose() } else { block });
                self.last_weights = Some(w.clone());
                Some(w)
            }
            None => self.last_weights.clone(),
        };
        self.latched = Some(Latched { weights, c_addr: c, c_cols: c_cols as usize, c_rows: c_rows as usize });
        Ok(())
    }

    fn compute(&mut self, args: &ComputeArgs, always_accumulate: bool) -> Step<()> {
        let latched = self.latched.clone().ok_or(ExecErrorKind::ComputeBeforePreload)?;
        let weights = latched.weights.ok_or(ExecErrorKind::ComputeBeforePreload)?;
        self.check_dims("compute", &[
            ("A_cols", args.a_cols),
            ("A_rows", args.a_rows),
            ("bias_cols", args.d_cols),
            ("bias_rows", args.d_rows),
        ])?;
        if args.a_local.is_accumulator() {
            return Err(ExecErrorKind::WrongAddressSpace("A must come from the scratchpad".into()));
        }
        let a_raw = self.read_block(args.a_local, args.a_rows as usize, args.a_cols as usize)?;
        let a = if self.regs.a_transpose { a_raw.transpose() } else { a_raw };
        let mut p = match weights {
            Weights::Zeros => Matrix::zeros(latched.c_rows, latched.c_cols),
            Weights::Block(w) => {
                if a.cols != w.rows {
                    return Err(ExecErrorKind::DimensionMismatch(format!(
                        "A is {}x{} but the preloaded weights are {}x{}",
                        a.rows, a.cols, w.rows, w.cols
                    )));
                }
                let mut p = Matrix::zeros(a.rows, w.cols);
                for i in 0..a.rows {
                    for j in 0..w.cols {
                        let mut s = 0.0;
                        for k in 0..a.cols {
                            s += a.get(i, k) * w.get(k, j);
                        }
                        p.set(i, j, s);
                    }
                }
                p
            }
        };
        if p.shape() != (latched.c_rows, latched.c_cols) {
            return Err(ExecErrorKind::DimensionMismatch(format!(
                "result is {}x{} but the preloaded output is {}x{}",
                p.rows, p.cols, latched.c_rows, latched.c_cols
            )));
        }
        if let Some(d) = args.d_local {
            let bias = self.read_block(d, args.d_rows as usize, args.d_cols as usize)?;
            if bias.shape() != p.shape() {
                return Err(ExecErrorKind::DimensionMismatch(format!(
                    "bias is {}x{} but the result is {}x{}",
                    bias.rows, bias.cols, p.rows, p.cols
                )));
            }
            for (x, b) in p.data.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        let accumulate = always_accumulate || latched.c_addr.accumulates();
        let base = u64::from(latched.c_addr.row());
        for r in 0..p.rows {
            for c in 0..p.cols {
                let cell = self.local_cell(base + r as u64, Space::Accumulator, c)?;
                if accumulate {
                    self.acc[cell] += p.get(r, c);
                } else {
                    self.acc[cell] = p.get(r, c);
                }
            }
        }
        Ok(())
    }
}

/// Runs `p` on `m` and returns the final machine.
pub fn execute(mut m: Machine, p: &Program) -> Result<Machine, SimError> {
    m.execute(p)?;
    Ok(m)
}
