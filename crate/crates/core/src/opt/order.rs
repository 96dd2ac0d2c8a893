//! Block ordering: plan validation and cost-driven search.

use serde::{Deserialize, Serialize};

use super::{Block, Edges, OptError, Peephole, EXHAUSTIVE_LIMIT};
use crate::cost::{instruction_cost, CostParams};
use crate::isa::Instruction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Search,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderingPlan {
    pub order: Vec<usize>,
    pub source: PlanSource,
}

/// Concatenates blocks in `order` (indices into `blocks`).
pub fn reassemble(blocks: &[Block], order: &[usize]) -> Vec<Instruction> {
    order.iter().flat_map(|&i| blocks[i].instructions.iter().cloned()).collect()
}

/// Checks that `order` is a permutation of `0..n` respecting every edge.
pub fn check_plan(order: &[usize], n: usize, edges: &Edges) -> Result<(), OptError> {
    let mut position = vec![usize::MAX; n];
    for (pos, &b) in order.iter().enumerate() {
        if b >= n || position[b] != usize::MAX {
            return Err(OptError::BadPlan(format!("not a permutation of 0..{n}")));
        }
        position[b] = pos;
    }
    if order.len() != n {
        return Err(OptError::BadPlan(format!("lists {} of {n} blocks", order.len())));
    }
    if let Some((a, b)) = edges.iter().find(|(a, b)| position[*a] > position[*b]) {
        return Err(OptError::BadPlan(format!("block {b} must stay after block {a}")));
    }
    Ok(())
}

/// Reads a block order from a reply: the first mention of each `Block N`
/// label, or failing that the first bracketed list of integers.
pub fn parse_plan(text: &str, n: usize) -> Result<Vec<usize>, OptError> {
    let mut order: Vec<usize> = Vec::new();
    let lower = text.to_ascii_lowercase();
    let mut rest = lower.as_str();
    while let Some(pos) = rest.find("block") {
        rest = &rest[pos + 5..];
        let digits: String = rest.trim_start().chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(id) = digits.parse::<usize>() {
            if !order.contains(&id) {
                order.push(id);
            }
        }
    }
    if order.is_empty() {
        if let (Some(open), Some(close)) = (text.find('['), text.find(']')) {
            if open < close {
                for item in text[open + 1..close].split(',') {
                    let id = item.trim().parse::<usize>().map_err(|_| OptError::BadPlan(format!("`{item}`")))?;
                    order.push(id);
                }
            }
        }
    }
    if order.len() != n || order.iter().any(|&b| b >= n) {
        return Err(OptError::BadPlan(format!("expected {n} distinct block ids, found {order:?}")));
    }
    Ok(order)
}

fn block_cost(block: &Block, pass: &mut Peephole, params: &CostParams, dim: u32) -> f64 {
    block.instructions.iter().filter_map(|i| pass.push(i)).map(|i| instruction_cost(&i, params, dim)).sum()
}

/// Cost of the program obtained by concatenating `order` and removing
/// cross-block redundancy.
pub fn ordered_cost(blocks: &[Block], order: &[usize], params: &CostParams, dim: u32) -> f64 {
    let mut pass = Peephole::new(dim);
    order.iter().map(|&i| block_cost(&blocks[i], &mut pass, params, dim)).sum()
}

fn predecessors(n: usize, edges: &Edges) -> Result<Vec<Vec<usize>>, OptError> {
    let mut preds = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(OptError::BadPlan(format!("edge ({a}, {b}) names a missing block")));
        }
        preds[b].push(a);
    }
    // Kahn's algorithm only to detect cycles
    let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(x) = ready.pop() {
        seen += 1;
        for &(a, b) in edges {
            if a == x {
                indegree[b] -= 1;
                if indegree[b] == 0 {
                    ready.push(b);
                }
            }
        }
    }
    if seen != n {
        return Err(OptError::CyclicDependence);
    }
    Ok(preds)
}

struct Exhaustive<'a> {
    blocks: &'a [Block],
    preds: &'a [Vec<usize>],
    params: &'a CostParams,
    dim: u32,
    best: Option<(f64, Vec<usize>)>,
}

impl Exhaustive<'_> {
    fn go(&mut self, prefix: &mut Vec<usize>, placed: &mut [bool], pass: &Peephole, cost: f64) {
        let n = self.blocks.len();
        if prefix.len() == n {
            if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
                self.best = Some((cost, prefix.clone()));
            }
            return;
        }
        for i in 0..n {
            if placed[i] || !self.preds[i].iter().all(|&p| placed[p]) {
                continue;
            }
            let mut next = pass.clone();
            let c = cost + block_cost(&self.blocks[i], &mut next, self.params, self.dim);
            placed[i] = true;
            prefix.push(i);
            self.go(prefix, placed, &next, c);
            prefix.pop();
            placed[i] = false;
        }
    }
}

/// Minimum-cost order respecting `edges`. Up to [`EXHAUSTIVE_LIMIT`] blocks
/// every topological order is tried and the lexicographically smallest of
/// the cheapest wins. Larger inputs are built greedily by appending the
/// cheapest ready block (lowest id on ties); the result is kept only if it
/// beats the original order.
pub fn search_reorder(
    blocks: &[Block],
    edges: &Edges,
    params: &CostParams,
    dim: u32,
) -> Result<OrderingPlan, OptError> {
    let n = blocks.len();
    let preds = predecessors(n, edges)?;
    let order = if n <= EXHAUSTIVE_LIMIT {
        let mut search = Exhaustive { blocks, preds: &preds, params, dim, best: None };
        search.go(&mut Vec::with_capacity(n), &mut vec![false; n], &Peephole::new(dim), 0.0);
        search.best.map(|(_, o)| o).unwrap_or_default()
    } else {
        let mut placed = vec![false; n];
        let mut pass = Peephole::new(dim);
        let mut order = Vec::with_capacity(n);
        for _ in 0..n {
            let mut best: Option<(f64, usize, Peephole)> = None;
            for i in 0..n {
                if placed[i] || !preds[i].iter().all(|&p| placed[p]) {
                    continue;
                }
                let mut next = pass.clone();
                let c = block_cost(&blocks[i], &mut next, params, dim);
                if best.as_ref().is_none_or(|(b, _, _)| c < *b) {
                    best = Some((c, i, next));
                }
            }
            let (_, i, next) = best.ok_or(OptError::CyclicDependence)?;
            placed[i] = true;
            order.push(i);
            pass = next;
        }
        let identity: Vec<usize> = (0..n).collect();
        if ordered_cost(blocks, &order, params, dim) < ordered_cost(blocks, &identity, params, dim) {
            order
        } else {
            identity
        }
    };
    Ok(OrderingPlan { order, source: PlanSource::Search })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_parsing() {
        assert_eq!(parse_plan("Block 2, Block 0, Block 1", 3).unwrap(), vec![2, 0, 1]);
        assert_eq!(parse_plan("order: [1, 0]", 2).unwrap(), vec![1, 0]);
        assert!(parse_plan("Block 0", 2).is_err());
    }

    #[test]
    fn plan_checking() {
        let edges: Edges = [(0, 1)].into_iter().collect();
        assert!(check_plan(&[0, 1], 2, &edges).is_ok());
        assert!(check_plan(&[1, 0], 2, &edges).is_err());
        assert!(check_plan(&[0, 0], 2, &edges).is_err());
    }
}
