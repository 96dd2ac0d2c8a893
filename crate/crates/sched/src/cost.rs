//! Locality cost proxy.
//!
//! `total = loop iterations + statement executions + penalty · strided`,
//! where `strided` counts dynamic array accesses whose innermost varying
//! loop variable moves by other than one element in the row-major layout.
//! Accesses that no enclosing loop varies are not counted; non-affine
//! indices count as strided.

use serde::{Deserialize, Serialize};

use crate::ir::{Access, LoopNest, Stmt};

pub const DEFAULT_PENALTY: f64 = 4.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub loop_iterations: f64,
    pub statements: f64,
    pub strided_accesses: f64,
    pub total: f64,
}

pub fn locality_cost(k: &LoopNest) -> f64 {
    locality_cost_with(k, DEFAULT_PENALTY).total
}

fn strided(k: &LoopNest, a: &Access, loops: &[&str]) -> bool {
    let Some(decl) = k.array(&a.array) else { return true };
    let mut coeffs = std::collections::BTreeMap::<String, i64>::new();
    let mut scale = 1i64;
    for (e, &extent) in a.index.iter().zip(&decl.extents).rev() {
        let Some((_, m)) = e.affine() else { return true };
        for (v, c) in m {
            *coeffs.entry(v).or_insert(0) += c * scale;
        }
        scale *= extent as i64;
    }
    loops.iter().rev().find_map(|v| coeffs.get(*v).filter(|c| **c != 0)).is_some_and(|c| c.abs() != 1)
}

fn walk(k: &LoopNest, stmts: &[Stmt], loops: &mut Vec<String>, trips: f64, t: &mut CostTerms) {
    for s in stmts {
        match s {
            Stmt::Loop(l) => {
                let n = trips * l.extent() as f64;
                t.loop_iterations += n;
                loops.push(l.var.clone());
                walk(k, &l.body, loops, n, t);
                loops.pop();
            }
            Stmt::Assign { dst, rhs } | Stmt::Accumulate { dst, rhs } => {
                t.statements += trips;
                let names: Vec<&str> = loops.iter().map(String::as_str).collect();
                let count = rhs.reads().into_iter().chain([dst]).filter(|a| strided(k, a, &names)).count();
                t.strided_accesses += trips * count as f64;
            }
        }
    }
}

pub fn locality_cost_with(k: &LoopNest, penalty: f64) -> CostTerms {
    let mut t = CostTerms::default();
    walk(k, &k.body, &mut Vec::new(), 1.0, &mut t);
    t.total = t.loop_iterations + t.statements + penalty * t.strided_accesses;
    t
}
