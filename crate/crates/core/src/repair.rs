//! Constant-hole repair of nearly correct translations.
//!
//! A candidate is first marked: uncertain constants become `<CONST>` holes
//! or newly declared integer constants. Holes are then filled either by the
//! model or by enumerating a small constant set, and every fill is verified.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::extract_code;
use crate::isa::{parse_program, BufferTable, Program};
use crate::kernels::{verify_program_fast, verify_text, KernelSpec, TestCase};
use crate::llm::{Backend, GenerationParams, LlmError};
use crate::prompt::{build_repair_prompts, repair_fill_conversation, PromptError};
use crate::sim::MachineConfig;

pub const HOLE_TOKEN: &str = "<CONST>";
pub const DEFAULT_CONSTANTS: [i64; 5] = [0, 1, 3, 4, 12];

const TYPE_WORDS: &[&str] = &["uint32_t", "int32_t", "uint64_t", "int64_t", "int", "unsigned", "size_t", "long"];

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("no holes found in the marked code")]
    NoHolesFound,
    #[error("the constant set is empty")]
    EmptyConstantSet,
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleKind {
    /// A `<CONST>` token.
    Marker,
    /// The initializer of an integer declaration absent from the original.
    Named,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hole {
    pub id: String,
    pub kind: HoleKind,
    /// 1-based line of the hole.
    pub line: usize,
    /// Byte range replaced by a fill.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoleTemplate {
    pub code: String,
    pub holes: Vec<Hole>,
    pub origin: Option<String>,
}

impl HoleTemplate {
    /// Substitutes `values[i]` for hole `i`.
    pub fn fill(&self, values: &[i64]) -> String {
        assert_eq!(values.len(), self.holes.len(), "one value per hole");
        let mut out = self.code.clone();
        for (hole, v) in self.holes.iter().zip(values).rev() {
            out.replace_range(hole.start..hole.end, &v.to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(i64),
    Hole,
    Punct(char),
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    start: usize,
    end: usize,
    line: usize,
}

fn number_value(text: &str) -> Option<i64> {
    let t = text.trim_end_matches(['u', 'U', 'l', 'L']);
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()
    } else {
        t.parse().ok()
    }
}

/// Token scan that skips comments and preprocessor lines.
fn scan(code: &str) -> Vec<Spanned> {
    let bytes = code.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line) = (0, 1);
    let mut line_start = true;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line += 1;
            line_start = true;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if line_start && c == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        line_start = false;
        if code[i..].starts_with("//") {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if code[i..].starts_with("/*") {
            let end = code[i + 2..].find("*/").map_or(bytes.len(), |p| i + 2 + p + 2);
            line += code[i..end].matches('\n').count();
            i = end;
            continue;
        }
        if code[i..].starts_with(HOLE_TOKEN) {
            out.push(Spanned { tok: Tok::Hole, start: i, end: i + HOLE_TOKEN.len(), line });
            i += HOLE_TOKEN.len();
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Spanned { tok: Tok::Ident(code[start..i].to_string()), start, end: i, line });
        } else if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric()) {
                i += 1;
            }
            match number_value(&code[start..i]) {
                Some(v) => out.push(Spanned { tok: Tok::Number(v), start, end: i, line }),
                None => out.push(Spanned { tok: Tok::Punct('?'), start, end: i, line }),
            }
        } else {
            let ch = code[i..].chars().next().expect("in bounds");
            i += ch.len_utf8();
            out.push(Spanned { tok: Tok::Punct(ch), start, end: i, line });
        }
    }
    out
}

/// Integer declarations `[static] [const] <type> NAME = <literal>;` as
/// `(name, literal token)`.
fn int_declarations(toks: &[Spanned]) -> Vec<(String, Spanned)> {
    let mut out = Vec::new();
    for w in toks.windows(5) {
        let is_type = matches!(&w[0].tok, Tok::Ident(t) if TYPE_WORDS.contains(&t.as_str()));
        if let (true, Tok::Ident(name), Tok::Punct('='), Tok::Number(_), Tok::Punct(';')) =
            (is_type, &w[1].tok, &w[2].tok, &w[3].tok, &w[4].tok)
        {
            out.push((name.clone(), w[3].clone()));
        }
    }
    out
}

/// Integer literal sites `(start, end, value)` outside comments, in textual
/// order.
pub fn constant_sites(code: &str) -> Vec<(usize, usize, i64)> {
    scan(code)
        .into_iter()
        .filter_map(|s| match s.tok {
            Tok::Number(v) => Some((s.start, s.end, v)),
            _ => None,
        })
        .collect()
}

/// Replaces the literal sites at `indices` (into [`constant_sites`]) with
/// `<CONST>` markers.
pub fn mark_sites(code: &str, indices: &[usize]) -> String {
    let sites = constant_sites(code);
    let mut chosen: Vec<usize> = indices.to_vec();
    chosen.sort_unstable();
    chosen.dedup();
    let mut out = code.to_string();
    for &i in chosen.iter().rev() {
        let (s, e, _) = sites[i];
        out.replace_range(s..e, HOLE_TOKEN);
    }
    out
}

/// Collects holes: every `<CONST>` token, plus integer declarations whose
/// name does not appear among the declarations of `original`.
pub fn extract_holes(marked_code: &str, original: Option<&str>) -> Result<HoleTemplate, RepairError> {
    let toks = scan(marked_code);
    let known: BTreeSet<String> = original
        .map(|o| int_declarations(&scan(o)).into_iter().map(|(n, _)| n).collect())
        .unwrap_or_default();
    let named: Vec<(String, Spanned)> = if original.is_some() {
        int_declarations(&toks).into_iter().filter(|(n, _)| !known.contains(n)).collect()
    } else {
        Vec::new()
    };

    let mut holes: Vec<Hole> = Vec::new();
    for t in &toks {
        if t.tok == Tok::Hole {
            holes.push(Hole { id: String::new(), kind: HoleKind::Marker, line: t.line, start: t.start, end: t.end });
        }
    }
    for (name, lit) in named {
        holes.push(Hole { id: name, kind: HoleKind::Named, line: lit.line, start: lit.start, end: lit.end });
    }
    if holes.is_empty() {
        return Err(RepairError::NoHolesFound);
    }
    holes.sort_by_key(|h| h.start);
    let mut marker = 0;
    for h in &mut holes {
        if h.kind == HoleKind::Marker {
            h.id = format!("h{marker}");
            marker += 1;
        }
    }
    Ok(HoleTemplate { code: marked_code.to_string(), holes, origin: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fill {
    /// Position in enumeration order, counting skipped fills.
    pub index: usize,
    pub assignment: Vec<i64>,
    pub code: String,
    pub program: Program,
}

/// Cartesian product of the constant set over the holes, hole 0 most
/// significant.
pub struct Fills<'a> {
    template: &'a HoleTemplate,
    constants: &'a [i64],
    buffers: &'a BufferTable,
    digits: Option<Vec<usize>>,
    produced: usize,
    cap: usize,
    /// Fills that did not parse.
    pub skipped: usize,
    /// Set when enumeration stopped at the cap with fills left.
    pub cap_hit: bool,
}

impl Fills<'_> {
    fn advance(&mut self) {
        let Some(digits) = self.digits.as_mut() else { return };
        for pos in (0..digits.len()).rev() {
            digits[pos] += 1;
            if digits[pos] < self.constants.len() {
                return;
            }
            digits[pos] = 0;
        }
        self.digits = None;
    }
}

impl Iterator for Fills<'_> {
    type Item = Fill;

    fn next(&mut self) -> Option<Fill> {
        loop {
            let digits = self.digits.clone()?;
            if self.produced >= self.cap {
                self.cap_hit = true;
                return None;
            }
            let index = self.produced;
            self.produced += 1;
            self.advance();
            let assignment: Vec<i64> = digits.iter().map(|&d| self.constants[d]).collect();
            let code = self.template.fill(&assignment);
            match parse_program(&code, self.buffers) {
                Ok(program) => return Some(Fill { index, assignment, code, program }),
                Err(_) => self.skipped += 1,
            }
        }
    }
}

pub fn enumerate_fills<'a>(
    template: &'a HoleTemplate,
    constants: &'a [i64],
    cap: usize,
    buffers: &'a BufferTable,
) -> Result<Fills<'a>, RepairError> {
    if constants.is_empty() {
        return Err(RepairError::EmptyConstantSet);
    }
    Ok(Fills {
        template,
        constants,
        buffers,
        digits: Some(vec![0; template.holes.len()]),
        produced: 0,
        cap,
        skipped: 0,
        cap_hit: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairMode {
    Llm,
    Enumerate,
    LlmThenEnumerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillSource {
    /// The candidate already passed.
    Identity,
    Llm,
    Enumeration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum RepairOutcome {
    Repaired { code: String, assignment: Vec<(String, i64)>, source: FillSource },
    Exhausted { tried: usize },
    Aborted { reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairStats {
    pub candidates_tried: usize,
    pub unparseable: usize,
    #[serde(skip)]
    pub verify_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairResult {
    pub outcome: RepairOutcome,
    pub stats: RepairStats,
}

impl RepairResult {
    pub fn is_repaired(&self) -> bool {
        matches!(self.outcome, RepairOutcome::Repaired { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairOptions {
    pub cap: usize,
    pub max_holes: usize,
    /// Fills verified in parallel per batch; results do not depend on it.
    pub batch: usize,
}

impl Default for RepairOptions {
    fn default() -> Self {
        RepairOptions { cap: 10_000, max_holes: 5, batch: 64 }
    }
}

/// Exhaustive fill of a hand-marked template. Returns the lowest-index
/// passing fill.
pub fn repair_template(
    template: &HoleTemplate,
    spec: &KernelSpec,
    cases: &[TestCase],
    constants: &[i64],
    opts: &RepairOptions,
    cfg: MachineConfig,
) -> Result<RepairResult, RepairError> {
    let mut stats = RepairStats::default();
    if template.holes.len() > opts.max_holes {
        return Ok(RepairResult {
            outcome: RepairOutcome::Aborted {
                reason: format!("{} holes exceed the limit of {}", template.holes.len(), opts.max_holes),
            },
            stats,
        });
    }
    let buffers = spec.buffer_table(cfg.dim);
    let mut fills = enumerate_fills(template, constants, opts.cap, &buffers)?;
    let started = Instant::now();
    let batch = opts.batch.max(1);
    let mut outcome = None;
    loop {
        let chunk: Vec<Fill> = fills.by_ref().take(batch).collect();
        if chunk.is_empty() {
            break;
        }
        let hit = chunk
            .par_iter()
            .position_first(|f| verify_program_fast(&f.program, spec, cases, cfg).passed);
        if let Some(pos) = hit {
            let f = &chunk[pos];
            stats.candidates_tried = f.index + 1;
            let assignment = template.holes.iter().map(|h| h.id.clone()).zip(f.assignment.iter().copied()).collect();
            outcome = Some(RepairOutcome::Repaired { code: f.code.clone(), assignment, source: FillSource::Enumeration });
            break;
        }
    }
    stats.verify_time = started.elapsed();
    stats.unparseable = fills.skipped;
    let outcome = outcome.unwrap_or_else(|| {
        stats.candidates_tried = fills.produced;
        RepairOutcome::Exhausted { tried: fills.produced }
    });
    Ok(RepairResult { outcome, stats })
}

/// Full repair flow. Marking always goes through `backend`; filling follows
/// `mode`.
#[allow(clippy::too_many_arguments)]
pub fn repair(
    candidate: &str,
    spec: &KernelSpec,
    cases: &[TestCase],
    constants: &[i64],
    mode: RepairMode,
    backend: &dyn Backend,
    params: &GenerationParams,
    opts: &RepairOptions,
    cfg: MachineConfig,
) -> Result<RepairResult, RepairError> {
    if constants.is_empty() {
        return Err(RepairError::EmptyConstantSet);
    }
    if verify_text(candidate, spec, cases, cfg, true).passed {
        return Ok(RepairResult {
            outcome: RepairOutcome::Repaired {
                code: candidate.to_string(),
                assignment: Vec::new(),
                source: FillSource::Identity,
            },
            stats: RepairStats::default(),
        });
    }

    let (mark, fill) = build_repair_prompts(candidate, constants)?;
    let one = GenerationParams { n_samples: 1, ..params.clone() };
    let reply = backend.complete(&mark, &one)?.remove(0).text;
    let marked = extract_code(&reply).unwrap_or_else(|| reply.clone());
    let template = match extract_holes(&marked, Some(candidate)) {
        Ok(mut t) => {
            t.origin = Some(candidate.to_string());
            t
        }
        Err(RepairError::NoHolesFound) => {
            return Ok(RepairResult {
                outcome: RepairOutcome::Aborted { reason: "the marking step produced no holes".into() },
                stats: RepairStats::default(),
            })
        }
        Err(e) => return Err(e),
    };

    let mut stats = RepairStats::default();
    if matches!(mode, RepairMode::Llm | RepairMode::LlmThenEnumerate) {
        let conversation = repair_fill_conversation(&mark, &reply, &fill);
        let started = Instant::now();
        let replies = backend.complete(&conversation, params)?;
        for r in &replies {
            stats.candidates_tried += 1;
            let Some(code) = extract_code(&r.text) else {
                stats.unparseable += 1;
                continue;
            };
            if verify_text(&code, spec, cases, cfg, true).passed {
                stats.verify_time = started.elapsed();
                return Ok(RepairResult {
                    outcome: RepairOutcome::Repaired { code, assignment: Vec::new(), source: FillSource::Llm },
                    stats,
                });
            }
        }
        stats.verify_time = started.elapsed();
        if mode == RepairMode::Llm {
            return Ok(RepairResult { outcome: RepairOutcome::Exhausted { tried: stats.candidates_tried }, stats });
        }
    }

    let mut result = repair_template(&template, spec, cases, constants, opts, cfg)?;
    result.stats.candidates_tried += stats.candidates_tried;
    result.stats.unparseable += stats.unparseable;
    result.stats.verify_time += stats.verify_time;
    if let RepairOutcome::Exhausted { tried } = &mut result.outcome {
        *tried = result.stats.candidates_tried;
    }
    Ok(result)
}
