//! Schedule command application.
//!
//! Every command either returns a new kernel or an error and leaves the
//! input untouched. Legality is checked conservatively: two accesses to the
//! same array, one of them a write, must use identical index lists that
//! contain the relevant loop variable as a whole index.

use std::collections::BTreeSet;

use crate::command::{FissionLocation, ScheduleCommand};
use crate::ir::{Access, Expr, Loop, LoopNest, Stmt, StmtPath};
use crate::{SchedError, REORDER_SINGLE_LOOP};

/// Largest number of statements a single unroll may produce.
const UNROLL_LIMIT: usize = 65_536;

fn normalize(line: &str) -> String {
    let s: String = line.chars().filter(|c| !c.is_whitespace()).collect();
    s.trim_end_matches(':').to_string()
}

/// Splits a trailing ` #N` occurrence suffix.
fn split_occurrence(line: &str) -> (&str, Option<usize>) {
    let trimmed = line.trim_end();
    if let Some(pos) = trimmed.rfind('#') {
        let digits = &trimmed[pos + 1..];
        if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
            if let Ok(n) = digits.parse() {
                return (&trimmed[..pos], Some(n));
            }
        }
    }
    (trimmed, None)
}

/// Locates the statement printed as `line`, honoring a ` #N` suffix.
pub fn find_line(k: &LoopNest, line: &str) -> Result<StmtPath, SchedError> {
    let (text, occurrence) = split_occurrence(line);
    let wanted = normalize(text);
    let matches: Vec<StmtPath> =
        k.lines().into_iter().filter(|l| normalize(&l.text) == wanted).map(|l| l.path).collect();
    match (occurrence, matches.len()) {
        (_, 0) => Err(SchedError::LineNotFound(line.to_string())),
        (Some(n), _) => matches.get(n).cloned().ok_or_else(|| SchedError::LineNotFound(line.to_string())),
        (None, 1) => Ok(matches.into_iter().next().expect("one match")),
        (None, count) => Err(SchedError::AmbiguousLine(line.to_string(), count)),
    }
}

fn loop_at<'a>(k: &'a LoopNest, path: &[usize], line: &str) -> Result<&'a Loop, SchedError> {
    match k.stmt(path) {
        Some(Stmt::Loop(l)) => Ok(l),
        _ => Err(SchedError::IllegalRewrite(format!("`{line}` is not a loop"))),
    }
}

/// Accesses of a statement list as `(access, is_write)`.
fn accesses(stmts: &[Stmt]) -> Vec<(&Access, bool)> {
    let mut out = Vec::new();
    for s in stmts {
        match s {
            Stmt::Loop(l) => out.extend(accesses(&l.body)),
            Stmt::Assign { dst, rhs } | Stmt::Accumulate { dst, rhs } => {
                out.extend(rhs.reads().into_iter().map(|a| (a, false)));
                out.push((dst, true));
            }
        }
    }
    out
}

fn separated(a: &Access, b: &Access, vars: &[&str]) -> bool {
    a.index == b.index && a.index.iter().any(|e| matches!(e, Expr::Var(v) if vars.contains(&v.as_str())))
}

/// First conflicting pair between `left` and `right` not separated by `vars`.
fn conflict(left: &[(&Access, bool)], right: &[(&Access, bool)], vars: &[&str]) -> Option<String> {
    for (a, aw) in left {
        for (b, bw) in right {
            if a.array == b.array && (*aw || *bw) && !separated(a, b, vars) {
                return Some(format!("`{a}` and `{b}` may touch the same element in different iterations"));
            }
        }
    }
    None
}

fn loop_vars(stmts: &[Stmt], out: &mut BTreeSet<String>) {
    for s in stmts {
        if let Stmt::Loop(l) = s {
            out.insert(l.var.clone());
            loop_vars(&l.body, out);
        }
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn replace_at(k: &LoopNest, path: &[usize], with: Vec<Stmt>) -> LoopNest {
    let mut out = k.clone();
    let list = out.siblings_mut(path).expect("path was resolved on this kernel");
    let i = *path.last().expect("non-empty path");
    list.splice(i..=i, with);
    out
}

fn checked(k: LoopNest) -> Result<LoopNest, SchedError> {
    k.validate().map_err(|e| SchedError::IllegalRewrite(format!("rewrite produced an invalid kernel: {e}")))?;
    Ok(k)
}

fn tile(k: &LoopNest, line: &str, size: i64, outer: &str, inner: &str) -> Result<LoopNest, SchedError> {
    let path = find_line(k, line)?;
    let l = loop_at(k, &path, line)?;
    if size <= 0 {
        return Err(SchedError::IllegalRewrite(format!("tile size {size} must be positive")));
    }
    if l.extent() % size != 0 {
        return Err(SchedError::NonDivisibleTile { extent: l.extent(), tile: size });
    }
    let mut taken = BTreeSet::new();
    loop_vars(&k.body, &mut taken);
    taken.remove(&l.var);
    for name in [outer, inner] {
        if !is_identifier(name) || taken.contains(name) || k.array(name).is_some() {
            return Err(SchedError::IllegalRewrite(format!("`{name}` cannot be used as a new loop name")));
        }
    }
    if outer == inner {
        return Err(SchedError::IllegalRewrite("outer and inner names must differ".into()));
    }
    let mut index = Expr::sum(Expr::var(inner), Expr::product(Expr::Int(size), Expr::var(outer)));
    if l.lo != 0 {
        index = Expr::sum(Expr::sum(Expr::Int(l.lo), Expr::var(inner)), Expr::product(Expr::Int(size), Expr::var(outer)));
    }
    let body = l.body.iter().map(|s| s.subst(&l.var, &index)).collect();
    let tiled = Loop {
        var: outer.to_string(),
        lo: 0,
        hi: l.extent() / size,
        body: vec![Stmt::Loop(Loop { var: inner.to_string(), lo: 0, hi: size, body })],
    };
    checked(replace_at(k, &path, vec![Stmt::Loop(tiled)]))
}

fn reorder(k: &LoopNest, line: &str) -> Result<LoopNest, SchedError> {
    let path = find_line(k, line)?;
    let outer = loop_at(k, &path, line)?;
    let inner = match outer.body.as_slice() {
        [Stmt::Loop(inner)] => inner,
        _ => {
            let mut node = path.clone();
            node.push(0);
            return Err(SchedError::IllegalRewrite(format!(
                "{REORDER_SINGLE_LOOP}, but it was:\n{}",
                k.render_cursor(&node).trim_end()
            )));
        }
    };
    let acc = accesses(&inner.body);
    if let Some(reason) = conflict(&acc, &acc, &[&outer.var, &inner.var]) {
        return Err(SchedError::IllegalRewrite(format!("cannot reorder `{}` and `{}`: {reason}", outer.var, inner.var)));
    }
    let swapped = Loop {
        var: inner.var.clone(),
        lo: inner.lo,
        hi: inner.hi,
        body: vec![Stmt::Loop(Loop { var: outer.var.clone(), lo: outer.lo, hi: outer.hi, body: inner.body.clone() })],
    };
    checked(replace_at(k, &path, vec![Stmt::Loop(swapped)]))
}

fn unroll(k: &LoopNest, line: &str) -> Result<LoopNest, SchedError> {
    let path = find_line(k, line)?;
    let l = loop_at(k, &path, line)?;
    let produced = l.extent().max(0) as usize * l.body.len();
    if produced > UNROLL_LIMIT {
        return Err(SchedError::IllegalRewrite(format!("unrolling would produce {produced} statements")));
    }
    let stmts = (l.lo..l.hi)
        .flat_map(|i| l.body.iter().map(move |s| (i, s)))
        .map(|(i, s)| s.subst(&l.var, &Expr::Int(i)).simplify())
        .collect();
    checked(replace_at(k, &path, stmts))
}

fn fuse(k: &LoopNest, line1: &str, line2: &str) -> Result<LoopNest, SchedError> {
    let p1 = find_line(k, line1)?;
    let p2 = find_line(k, line2)?;
    let a = loop_at(k, &p1, line1)?;
    let b = loop_at(k, &p2, line2)?;
    let adjacent = p1.len() == p2.len()
        && p1[..p1.len() - 1] == p2[..p2.len() - 1]
        && p2.last().copied() == p1.last().map(|i| i + 1);
    if !adjacent {
        return Err(SchedError::IllegalRewrite("the loops to fuse must be adjacent siblings, first before second".into()));
    }
    if (a.lo, a.hi) != (b.lo, b.hi) {
        return Err(SchedError::IllegalRewrite(format!(
            "loop bounds differ: seq({}, {}) vs seq({}, {})",
            a.lo, a.hi, b.lo, b.hi
        )));
    }
    let mut inner_vars = BTreeSet::new();
    loop_vars(&b.body, &mut inner_vars);
    if inner_vars.contains(&a.var) {
        return Err(SchedError::IllegalRewrite(format!("`{}` is already used inside the second loop", a.var)));
    }
    let renamed: Vec<Stmt> = b.body.iter().map(|s| s.subst(&b.var, &Expr::var(&a.var))).collect();
    if let Some(reason) = conflict(&accesses(&a.body), &accesses(&renamed), &[&a.var]) {
        return Err(SchedError::IllegalRewrite(format!("cannot fuse: {reason}")));
    }
    let mut body = a.body.clone();
    body.extend(renamed);
    let fused = Loop { var: a.var.clone(), lo: a.lo, hi: a.hi, body };
    let mut out = replace_at(k, &p2, Vec::new());
    let list = out.siblings_mut(&p1).expect("first loop still present");
    list[*p1.last().expect("non-empty")] = Stmt::Loop(fused);
    checked(out)
}

fn fission(k: &LoopNest, line: &str, location: FissionLocation) -> Result<LoopNest, SchedError> {
    let path = find_line(k, line)?;
    let (idx, parent_path) = path.split_last().expect("non-empty path");
    if parent_path.is_empty() {
        return Err(SchedError::IllegalRewrite(format!("`{line}` is not inside a loop")));
    }
    let parent = loop_at(k, parent_path, line)?;
    let split = match location {
        FissionLocation::Before => *idx,
        FissionLocation::After => idx + 1,
    };
    if split == 0 || split == parent.body.len() {
        return Err(SchedError::IllegalRewrite(format!(
            "splitting {} `{line}` leaves one of the loops empty",
            if location == FissionLocation::Before { "before" } else { "after" }
        )));
    }
    let (first, second) = parent.body.split_at(split);
    if let Some(reason) = conflict(&accesses(first), &accesses(second), &[&parent.var]) {
        return Err(SchedError::IllegalRewrite(format!("cannot fission `{}`: {reason}", parent.var)));
    }
    let mk = |body: &[Stmt]| Stmt::Loop(Loop { var: parent.var.clone(), lo: parent.lo, hi: parent.hi, body: body.to_vec() });
    checked(replace_at(k, parent_path, vec![mk(first), mk(second)]))
}

/// Applies one command. The input kernel is never modified.
pub fn apply_schedule_command(k: &LoopNest, c: &ScheduleCommand) -> Result<LoopNest, SchedError> {
    match c {
        ScheduleCommand::Tile { line, tile_size, outer_name, inner_name } => {
            tile(k, line, *tile_size, outer_name, inner_name)
        }
        ScheduleCommand::Reorder { line } => reorder(k, line),
        ScheduleCommand::Unroll { line } => unroll(k, line),
        ScheduleCommand::Fuse { line1, line2 } => fuse(k, line1, line2),
        ScheduleCommand::Fission { line, location } => fission(k, line, *location),
    }
}
