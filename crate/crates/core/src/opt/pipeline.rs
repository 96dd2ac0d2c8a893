//! End-to-end optimization with verification after every stage.

use serde::{Deserialize, Serialize};

use super::{
    analyze_dependences, check_plan, compute_footprints, parse_plan, peephole_instructions, reassemble,
    search_reorder, segment_blocks, Block, OptError, OrderingPlan, PlanSource,
};
use crate::cost::{instructions_cost, program_cost, CostBreakdown, CostParams};
use crate::eval::extract_code;
use crate::isa::{parse_program, render_instruction, Program};
use crate::kernels::{verify_program_fast, KernelSpec, TestCase};
use crate::llm::{Backend, GenerationParams};
use crate::prompt::{build_block_optimize_prompt, build_reorder_prompt, default_heuristics, ISA_TEXT};
use crate::sim::MachineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeMode {
    Rules,
    Llm,
    LlmThenRules,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub program: Program,
    pub before: CostBreakdown,
    pub after: CostBreakdown,
    pub plan: OrderingPlan,
    /// Stages that were rejected and fell back to their input.
    pub notes: Vec<String>,
}

struct Ctx<'a> {
    base: &'a Program,
    spec: &'a KernelSpec,
    cases: &'a [TestCase],
    cfg: MachineConfig,
    params: &'a CostParams,
    dim: u32,
}

impl Ctx<'_> {
    fn passes(&self, instrs: Vec<crate::isa::Instruction>) -> bool {
        verify_program_fast(&self.base.with_instructions(instrs), self.spec, self.cases, self.cfg).passed
    }

    fn cost(&self, blocks: &[Block]) -> f64 {
        blocks.iter().flat_map(|b| &b.instructions).map(|i| crate::cost::instruction_cost(i, self.params, self.dim)).sum()
    }
}

fn block_text(b: &Block) -> String {
    b.instructions.iter().map(render_instruction).collect::<Vec<_>>().join("\n")
}

fn one_sample(params: &GenerationParams) -> GenerationParams {
    GenerationParams { n_samples: 1, ..params.clone() }
}

/// Replaces block `i` with `candidate` if the whole program still verifies
/// and the block got no more expensive.
fn try_block(ctx: &Ctx, blocks: &mut [Block], i: usize, candidate: Vec<crate::isa::Instruction>) -> bool {
    if candidate == blocks[i].instructions {
        return false;
    }
    let old_cost = ctx.cost(&blocks[i..=i]);
    let old = std::mem::replace(&mut blocks[i].instructions, candidate);
    let new_cost = ctx.cost(&blocks[i..=i]);
    let order: Vec<usize> = (0..blocks.len()).collect();
    if new_cost <= old_cost && ctx.passes(reassemble(blocks, &order)) {
        return true;
    }
    blocks[i].instructions = old;
    false
}

/// Segments `p`, rewrites blocks, orders them, removes cross-block
/// redundancy and verifies. Any stage whose output fails verification is
/// undone, so the result always verifies and never costs more than `p`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_program(
    p: &Program,
    spec: &KernelSpec,
    cases: &[TestCase],
    mode: OptimizeMode,
    backend: Option<&dyn Backend>,
    gen: &GenerationParams,
    params: &CostParams,
    cfg: MachineConfig,
) -> Result<OptimizeResult, OptError> {
    let dim = cfg.dim as u32;
    let before = program_cost(p, params, &cfg).map_err(|crate::cost::CostError::Validation(e)| OptError::Validation(e))?;
    if !verify_program_fast(p, spec, cases, cfg).passed {
        return Err(OptError::UnverifiedInput);
    }
    let uses_llm = matches!(mode, OptimizeMode::Llm | OptimizeMode::LlmThenRules);
    if uses_llm && backend.is_none() {
        return Err(OptError::NoBackend);
    }
    let ctx = Ctx { base: p, spec, cases, cfg, params, dim };
    let mut notes = Vec::new();
    let mut blocks = segment_blocks(p, dim)?;

    if let (true, Some(backend)) = (uses_llm, backend) {
        let heuristics = default_heuristics();
        for i in 0..blocks.len() {
            let prompt = build_block_optimize_prompt(&block_text(&blocks[i]), ISA_TEXT, &heuristics);
            let reply = backend.complete(&prompt, &one_sample(gen))?.remove(0).text;
            let parsed = extract_code(&reply).and_then(|code| parse_program(&code, &p.buffers).ok());
            match parsed {
                Some(q) => {
                    if !try_block(&ctx, &mut blocks, i, q.instructions) {
                        notes.push(format!("block {i}: model rewrite rejected"));
                    }
                }
                None => notes.push(format!("block {i}: model reply did not parse")),
            }
        }
    }
    if matches!(mode, OptimizeMode::Rules | OptimizeMode::LlmThenRules) {
        for i in 0..blocks.len() {
            let candidate = peephole_instructions(&blocks[i].instructions, dim);
            if candidate != blocks[i].instructions && !try_block(&ctx, &mut blocks, i, candidate) {
                notes.push(format!("block {i}: peephole rewrite rejected"));
            }
        }
    }
    compute_footprints(&mut blocks, dim);
    let edges = analyze_dependences(&blocks);

    let mut plan = None;
    if let (true, Some(backend)) = (uses_llm, backend) {
        let texts: Vec<String> = blocks.iter().map(block_text).collect();
        if let Ok(prompt) = build_reorder_prompt(&texts, ISA_TEXT) {
            let reply = backend.complete(&prompt, &one_sample(gen))?.remove(0).text;
            match parse_plan(&reply, blocks.len()).and_then(|o| check_plan(&o, blocks.len(), &edges).map(|_| o)) {
                Ok(order) => plan = Some(OrderingPlan { order, source: PlanSource::Llm }),
                Err(e) => notes.push(format!("model plan rejected ({e}); using search")),
            }
        }
    }
    let plan = match plan {
        Some(p) => p,
        None => search_reorder(&blocks, &edges, params, dim)?,
    };

    let identity: Vec<usize> = (0..blocks.len()).collect();
    let mut instructions = peephole_instructions(&reassemble(&blocks, &plan.order), dim);
    let mut final_plan = plan;
    if !ctx.passes(instructions.clone()) {
        notes.push("reordered program failed verification; kept original order".into());
        instructions = reassemble(&blocks, &identity);
        final_plan = OrderingPlan { order: identity, source: PlanSource::Search };
    }
    let after = instructions_cost(&instructions, params, dim);
    if after.total > before.total || !ctx.passes(instructions.clone()) {
        notes.push("optimization did not pay off; returning the input".into());
        return Ok(OptimizeResult {
            program: p.clone(),
            after: before.clone(),
            before,
            plan: OrderingPlan { order: (0..segment_blocks(p, dim)?.len()).collect(), source: PlanSource::Search },
            notes,
        });
    }
    Ok(OptimizeResult { program: p.with_instructions(instructions), before, after, plan: final_plan, notes })
}
