//! Reference interpreter and randomized equivalence checking.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ir::{Access, BinOp, Expr, LoopNest, Stmt};
use crate::SchedError;

/// Array contents, flattened row-major.
pub type Values = BTreeMap<String, Vec<f32>>;

struct Machine<'a> {
    kernel: &'a LoopNest,
    values: Values,
    env: Vec<(&'a str, i64)>,
}

impl<'a> Machine<'a> {
    fn var(&self, name: &str) -> i64 {
        self.env.iter().rev().find(|(v, _)| *v == name).map(|(_, x)| *x).expect("validated kernel binds every variable")
    }

    fn int(&self, e: &Expr) -> i64 {
        match e {
            Expr::Int(v) => *v,
            Expr::Var(v) => self.var(v),
            Expr::Neg(x) => -self.int(x),
            Expr::Bin(op, l, r) => {
                let (l, r) = (self.int(l), self.int(r));
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                }
            }
            Expr::Float(_) | Expr::Read(_) => unreachable!("validated index expressions are integer"),
        }
    }

    fn offset(&self, a: &Access) -> usize {
        let decl = self.kernel.array(&a.array).expect("validated array");
        a.index.iter().zip(&decl.extents).fold(0usize, |acc, (e, &extent)| acc * extent + self.int(e) as usize)
    }

    fn value(&self, e: &Expr) -> f32 {
        match e {
            Expr::Int(v) => *v as f32,
            Expr::Float(v) => *v,
            Expr::Var(v) => self.var(v) as f32,
            Expr::Read(a) => self.values[&a.array][self.offset(a)],
            Expr::Neg(x) => -self.value(x),
            Expr::Bin(op, l, r) => {
                let (l, r) = (self.value(l), self.value(r));
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                }
            }
        }
    }

    fn run(&mut self, stmts: &'a [Stmt]) {
        for s in stmts {
            match s {
                Stmt::Loop(l) => {
                    for i in l.lo..l.hi {
                        self.env.push((&l.var, i));
                        self.run(&l.body);
                        self.env.pop();
                    }
                }
                Stmt::Assign { dst, rhs } => {
                    let v = self.value(rhs);
                    let at = self.offset(dst);
                    self.values.get_mut(&dst.array).expect("validated array")[at] = v;
                }
                Stmt::Accumulate { dst, rhs } => {
                    let v = self.value(rhs);
                    let at = self.offset(dst);
                    self.values.get_mut(&dst.array).expect("validated array")[at] += v;
                }
            }
        }
    }
}

/// Runs `k` sequentially in 32-bit floats and returns every array.
pub fn interpret(k: &LoopNest, inputs: &Values) -> Result<Values, SchedError> {
    for decl in &k.arrays {
        match inputs.get(&decl.name) {
            Some(v) if v.len() == decl.len() => {}
            Some(v) => {
                return Err(SchedError::ShapeMismatch(format!(
                    "`{}` has {} values, expected {}",
                    decl.name,
                    v.len(),
                    decl.len()
                )))
            }
            None => return Err(SchedError::ShapeMismatch(format!("missing array `{}`", decl.name))),
        }
    }
    if let Some(extra) = inputs.keys().find(|n| k.array(n).is_none()) {
        return Err(SchedError::ShapeMismatch(format!("unknown array `{extra}`")));
    }
    let mut m = Machine { kernel: k, values: inputs.clone(), env: Vec::new() };
    m.run(&k.body);
    Ok(m.values)
}

/// Small-integer values in `[-4, 4]` for every array, drawn in declaration
/// order from a generator seeded with `seed` and `trial`.
pub fn random_inputs(k: &LoopNest, seed: u64, trial: u64) -> Values {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(trial));
    k.arrays
        .iter()
        .map(|a| (a.name.clone(), (0..a.len()).map(|_| rng.gen_range(-4i32..=4) as f32).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub trial: u64,
    pub array: String,
    pub index: usize,
    pub left: f32,
    pub right: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub passed: bool,
    pub trials: u64,
    /// Earliest failing trial.
    pub mismatch: Option<Mismatch>,
}

fn signature(k: &LoopNest) -> BTreeMap<&str, &[usize]> {
    k.arrays.iter().map(|a| (a.name.as_str(), a.extents.as_slice())).collect()
}

/// Runs both kernels on `trials` random input sets and compares every
/// array bit for bit.
pub fn check_equivalence(k1: &LoopNest, k2: &LoopNest, trials: u64, seed: u64) -> Result<Equivalence, SchedError> {
    if signature(k1) != signature(k2) {
        return Err(SchedError::SignatureMismatch(format!("`{}` vs `{}`", k1.header(), k2.header())));
    }
    let results: Vec<Option<Mismatch>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let inputs = random_inputs(k1, seed, trial);
            let a = interpret(k1, &inputs)?;
            let b = interpret(k2, &inputs)?;
            for (name, left) in &a {
                let right = &b[name];
                if let Some(i) = (0..left.len()).find(|&i| left[i].to_bits() != right[i].to_bits()) {
                    return Ok(Some(Mismatch { trial, array: name.clone(), index: i, left: left[i], right: right[i] }));
                }
            }
            Ok(None)
        })
        .collect::<Result<_, SchedError>>()?;
    let mismatch = results.into_iter().flatten().next();
    Ok(Equivalence { passed: mismatch.is_none(), trials, mismatch })
}
