//! Loop-nest IR for the `seq`-loop dialect, with its parser and printer.
//!
//! ```text
//! def kernel(A: f32[8, 8] @ DRAM, x: f32[8] @ DRAM):
//!     for i in seq(0, 8):
//!         x[i] = 0.0
//!         for j in seq(0, 8):
//!             x[i] += A[i, j]
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::SchedError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Int(i64),
    Float(f32),
    Var(String),
    Read(Access),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Access {
    pub array: String,
    pub index: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loop {
    pub var: String,
    pub lo: i64,
    pub hi: i64,
    pub body: Vec<Stmt>,
}

impl Loop {
    pub fn extent(&self) -> i64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stmt {
    Loop(Loop),
    Assign { dst: Access, rhs: Expr },
    Accumulate { dst: Access, rhs: Expr },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayDecl {
    pub name: String,
    pub extents: Vec<usize>,
    pub memory: String,
}

impl ArrayDecl {
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopNest {
    pub name: String,
    pub arrays: Vec<ArrayDecl>,
    pub body: Vec<Stmt>,
}

impl Expr {
    pub fn sum(a: Expr, b: Expr) -> Expr {
        Expr::Bin(BinOp::Add, Box::new(a), Box::new(b))
    }

    pub fn product(a: Expr, b: Expr) -> Expr {
        Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b))
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    /// Replaces every occurrence of `var` with `with`.
    pub fn subst(&self, var: &str, with: &Expr) -> Expr {
        match self {
            Expr::Var(v) if v == var => with.clone(),
            Expr::Int(_) | Expr::Float(_) | Expr::Var(_) => self.clone(),
            Expr::Read(a) => Expr::Read(a.subst(var, with)),
            Expr::Neg(e) => Expr::Neg(Box::new(e.subst(var, with))),
            Expr::Bin(op, l, r) => Expr::Bin(*op, Box::new(l.subst(var, with)), Box::new(r.subst(var, with))),
        }
    }

    /// Folds integer arithmetic. In index position `x + 0` and `x * 1` are
    /// also removed; value expressions keep them since `-0.0 + 0` is `+0.0`.
    pub fn simplify(&self, index: bool) -> Expr {
        match self {
            Expr::Read(a) => Expr::Read(a.simplify()),
            Expr::Neg(e) => match e.simplify(index) {
                Expr::Int(v) => Expr::Int(-v),
                other => Expr::Neg(Box::new(other)),
            },
            Expr::Bin(op, l, r) => {
                let (l, r) = (l.simplify(index), r.simplify(index));
                match (op, &l, &r) {
                    (BinOp::Add, Expr::Int(a), Expr::Int(b)) => Expr::Int(a + b),
                    (BinOp::Sub, Expr::Int(a), Expr::Int(b)) => Expr::Int(a - b),
                    (BinOp::Mul, Expr::Int(a), Expr::Int(b)) => Expr::Int(a * b),
                    (BinOp::Add, Expr::Int(0), _) if index => r,
                    (BinOp::Add | BinOp::Sub, _, Expr::Int(0)) if index => l,
                    (BinOp::Mul, Expr::Int(1), _) if index => r,
                    (BinOp::Mul, _, Expr::Int(1)) if index => l,
                    _ => Expr::Bin(*op, Box::new(l), Box::new(r)),
                }
            }
            _ => self.clone(),
        }
    }

    pub fn mentions(&self, var: &str) -> bool {
        match self {
            Expr::Var(v) => v == var,
            Expr::Int(_) | Expr::Float(_) => false,
            Expr::Read(a) => a.index.iter().any(|e| e.mentions(var)),
            Expr::Neg(e) => e.mentions(var),
            Expr::Bin(_, l, r) => l.mentions(var) || r.mentions(var),
        }
    }

    /// Array reads in evaluation order.
    pub fn reads(&self) -> Vec<&Access> {
        let mut out = Vec::new();
        self.collect_reads(&mut out);
        out
    }

    fn collect_reads<'a>(&'a self, out: &mut Vec<&'a Access>) {
        match self {
            Expr::Read(a) => {
                out.push(a);
                a.index.iter().for_each(|e| e.collect_reads(out));
            }
            Expr::Neg(e) => e.collect_reads(out),
            Expr::Bin(_, l, r) => {
                l.collect_reads(out);
                r.collect_reads(out);
            }
            _ => {}
        }
    }

    /// `const + Σ coeff·var` when the expression is affine in its variables.
    pub fn affine(&self) -> Option<(i64, BTreeMap<String, i64>)> {
        match self {
            Expr::Int(v) => Some((*v, BTreeMap::new())),
            Expr::Var(v) => Some((0, BTreeMap::from([(v.clone(), 1)]))),
            Expr::Neg(e) => {
                let (c, m) = e.affine()?;
                Some((-c, m.into_iter().map(|(k, v)| (k, -v)).collect()))
            }
            Expr::Bin(op, l, r) => {
                let (lc, lm) = l.affine()?;
                let (rc, rm) = r.affine()?;
                match op {
                    BinOp::Add | BinOp::Sub => {
                        let sign = if *op == BinOp::Sub { -1 } else { 1 };
                        let mut m = lm;
                        for (k, v) in rm {
                            *m.entry(k).or_insert(0) += sign * v;
                        }
                        m.retain(|_, v| *v != 0);
                        Some((lc + sign * rc, m))
                    }
                    BinOp::Mul => {
                        let (scale, c, m) = match (lm.is_empty(), rm.is_empty()) {
                            (true, _) => (lc, rc, rm),
                            (_, true) => (rc, lc, lm),
                            _ => return None,
                        };
                        let mut m: BTreeMap<String, i64> = m.into_iter().map(|(k, v)| (k, v * scale)).collect();
                        m.retain(|_, v| *v != 0);
                        Some((c * scale, m))
                    }
                }
            }
            Expr::Float(_) | Expr::Read(_) => None,
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(op, ..) => op.precedence(),
            Expr::Neg(_) => 3,
            Expr::Int(v) if *v < 0 => 3,
            Expr::Float(v) if v.is_sign_negative() => 3,
            _ => 4,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let paren = self.precedence() < min;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Expr::Int(v) => write!(f, "{v}")?,
            Expr::Float(v) => {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    write!(f, "{v:.1}")?
                } else {
                    write!(f, "{v}")?
                }
            }
            Expr::Var(v) => f.write_str(v)?,
            Expr::Read(a) => write!(f, "{a}")?,
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.fmt_prec(f, 4)?;
            }
            Expr::Bin(op, l, r) => {
                let p = op.precedence();
                l.fmt_prec(f, p)?;
                write!(f, " {} ", op.symbol())?;
                r.fmt_prec(f, p + 1)?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl Access {
    pub fn subst(&self, var: &str, with: &Expr) -> Access {
        Access { array: self.array.clone(), index: self.index.iter().map(|e| e.subst(var, with)).collect() }
    }

    fn simplify(&self) -> Access {
        Access { array: self.array.clone(), index: self.index.iter().map(|e| e.simplify(true)).collect() }
    }
}

impl fmt::Display for Access {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.array)?;
        for (i, e) in self.index.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{e}")?;
        }
        f.write_str("]")
    }
}

impl Stmt {
    pub fn subst(&self, var: &str, with: &Expr) -> Stmt {
        match self {
            Stmt::Loop(l) => Stmt::Loop(Loop {
                var: l.var.clone(),
                lo: l.lo,
                hi: l.hi,
                body: l.body.iter().map(|s| s.subst(var, with)).collect(),
            }),
            Stmt::Assign { dst, rhs } => Stmt::Assign { dst: dst.subst(var, with), rhs: rhs.subst(var, with) },
            Stmt::Accumulate { dst, rhs } => Stmt::Accumulate { dst: dst.subst(var, with), rhs: rhs.subst(var, with) },
        }
    }

    pub fn simplify(&self) -> Stmt {
        match self {
            Stmt::Loop(l) => Stmt::Loop(Loop {
                var: l.var.clone(),
                lo: l.lo,
                hi: l.hi,
                body: l.body.iter().map(Stmt::simplify).collect(),
            }),
            Stmt::Assign { dst, rhs } => Stmt::Assign { dst: dst.simplify(), rhs: rhs.simplify(false) },
            Stmt::Accumulate { dst, rhs } => Stmt::Accumulate { dst: dst.simplify(), rhs: rhs.simplify(false) },
        }
    }

    /// First line of the statement as printed, without indentation.
    pub fn head(&self) -> String {
        match self {
            Stmt::Loop(l) => format!("for {} in seq({}, {}):", l.var, l.lo, l.hi),
            Stmt::Assign { dst, rhs } => format!("{dst} = {rhs}"),
            Stmt::Accumulate { dst, rhs } => format!("{dst} += {rhs}"),
        }
    }

    fn render(&self, indent: usize, out: &mut String) {
        out.push_str(&" ".repeat(indent));
        out.push_str(&self.head());
        out.push('\n');
        if let Stmt::Loop(l) = self {
            for s in &l.body {
                s.render(indent + 4, out);
            }
        }
    }
}

/// Path from the kernel body to a statement: child indices at each level.
pub type StmtPath = Vec<usize>;

/// One printed statement line, as used for line matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceLine {
    pub text: String,
    pub path: StmtPath,
}

const HEADER_WIDTH: usize = 80;

impl LoopNest {
    pub fn array(&self, name: &str) -> Option<&ArrayDecl> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// `def name(...):` wrapped at 80 columns with aligned continuation lines.
    pub fn header(&self) -> String {
        let open = format!("def {}(", self.name);
        let params: Vec<String> = self
            .arrays
            .iter()
            .map(|a| {
                let dims: Vec<String> = a.extents.iter().map(usize::to_string).collect();
                format!("{}: f32[{}] @ {}", a.name, dims.join(", "), a.memory)
            })
            .collect();
        let mut out = open.clone();
        let mut line_len = open.len();
        for (i, p) in params.iter().enumerate() {
            let piece = if i + 1 == params.len() { format!("{p}):") } else { format!("{p},") };
            if i > 0 {
                if line_len + 1 + piece.len() > HEADER_WIDTH {
                    out.push('\n');
                    out.push_str(&" ".repeat(open.len()));
                    line_len = open.len();
                } else {
                    out.push(' ');
                    line_len += 1;
                }
            }
            out.push_str(&piece);
            line_len += piece.len();
        }
        if params.is_empty() {
            out.push_str("):");
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for s in &self.body {
            s.render(4, &mut out);
        }
        out
    }

    /// Every statement line in print order.
    pub fn lines(&self) -> Vec<SourceLine> {
        fn walk(stmts: &[Stmt], prefix: &mut StmtPath, out: &mut Vec<SourceLine>) {
            for (i, s) in stmts.iter().enumerate() {
                prefix.push(i);
                out.push(SourceLine { text: s.head(), path: prefix.clone() });
                if let Stmt::Loop(l) = s {
                    walk(&l.body, prefix, out);
                }
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        walk(&self.body, &mut Vec::new(), &mut out);
        out
    }

    pub fn stmt(&self, path: &[usize]) -> Option<&Stmt> {
        let (first, rest) = path.split_first()?;
        let mut s = self.body.get(*first)?;
        for &i in rest {
            match s {
                Stmt::Loop(l) => s = l.body.get(i)?,
                _ => return None,
            }
        }
        Some(s)
    }

    /// The statement list holding the statement at `path`.
    pub fn siblings_mut(&mut self, path: &[usize]) -> Option<&mut Vec<Stmt>> {
        let (_, parents) = path.split_last()?;
        let mut list = &mut self.body;
        for &i in parents {
            match list.get_mut(i)? {
                Stmt::Loop(l) => list = &mut l.body,
                _ => return None,
            }
        }
        Some(list)
    }

    /// Kernel text from the header down to the statement at `path`, eliding
    /// earlier siblings with `...` and marking the statement.
    pub fn render_cursor(&self, path: &[usize]) -> String {
        let mut out = self.header();
        out.push('\n');
        let mut list = &self.body;
        let mut indent = 4;
        for (depth, &i) in path.iter().enumerate() {
            if i > 0 {
                out.push_str(&format!("{}...\n", " ".repeat(indent)));
            }
            let Some(s) = list.get(i) else { break };
            out.push_str(&" ".repeat(indent));
            out.push_str(&s.head());
            if depth + 1 == path.len() {
                out.push_str("  # <-- NODE");
            }
            out.push('\n');
            match s {
                Stmt::Loop(l) => list = &l.body,
                _ => break,
            }
            indent += 4;
        }
        out
    }

    /// Clone with every loop bound and array extent equal to `from` replaced
    /// by `to`.
    pub fn with_extent(&self, from: i64, to: i64) -> LoopNest {
        fn map(stmts: &[Stmt], from: i64, to: i64) -> Vec<Stmt> {
            stmts
                .iter()
                .map(|s| match s {
                    Stmt::Loop(l) => Stmt::Loop(Loop {
                        var: l.var.clone(),
                        lo: if l.lo == from { to } else { l.lo },
                        hi: if l.hi == from { to } else { l.hi },
                        body: map(&l.body, from, to),
                    }),
                    other => other.clone(),
                })
                .collect()
        }
        let arrays = self
            .arrays
            .iter()
            .map(|a| ArrayDecl {
                extents: a.extents.iter().map(|&e| if e as i64 == from { to as usize } else { e }).collect(),
                ..a.clone()
            })
            .collect();
        LoopNest { name: self.name.clone(), arrays, body: map(&self.body, from, to) }
    }

    /// Checks variable scoping, array ranks and that every access stays in
    /// bounds over the whole iteration space.
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.body.is_empty() {
            return Err(SchedError::Syntax { line: 0, message: "kernel body is empty".into() });
        }
        let mut scope = Vec::new();
        self.check_stmts(&self.body, &mut scope)
    }

    fn check_stmts(&self, stmts: &[Stmt], scope: &mut Vec<(String, i64, i64)>) -> Result<(), SchedError> {
        for s in stmts {
            match s {
                Stmt::Loop(l) => {
                    if scope.iter().any(|(v, ..)| v == &l.var) || self.array(&l.var).is_some() {
                        return Err(SchedError::Syntax {
                            line: 0,
                            message: format!("loop variable `{}` shadows another name", l.var),
                        });
                    }
                    if l.hi < l.lo {
                        return Err(SchedError::Syntax {
                            line: 0,
                            message: format!("empty range seq({}, {})", l.lo, l.hi),
                        });
                    }
                    if l.body.is_empty() {
                        return Err(SchedError::Syntax { line: 0, message: format!("loop `{}` has no body", l.var) });
                    }
                    scope.push((l.var.clone(), l.lo, l.hi - 1));
                    self.check_stmts(&l.body, scope)?;
                    scope.pop();
                }
                Stmt::Assign { dst, rhs } | Stmt::Accumulate { dst, rhs } => {
                    self.check_access(dst, scope)?;
                    self.check_value(rhs, scope)?;
                }
            }
        }
        Ok(())
    }

    fn check_value(&self, e: &Expr, scope: &[(String, i64, i64)]) -> Result<(), SchedError> {
        match e {
            Expr::Var(v) if !scope.iter().any(|(s, ..)| s == v) => {
                Err(SchedError::Syntax { line: 0, message: format!("unknown variable `{v}`") })
            }
            Expr::Read(a) => self.check_access(a, scope),
            Expr::Neg(x) => self.check_value(x, scope),
            Expr::Bin(_, l, r) => {
                self.check_value(l, scope)?;
                self.check_value(r, scope)
            }
            _ => Ok(()),
        }
    }

    fn check_access(&self, a: &Access, scope: &[(String, i64, i64)]) -> Result<(), SchedError> {
        let decl = self
            .array(&a.array)
            .ok_or_else(|| SchedError::Syntax { line: 0, message: format!("unknown array `{}`", a.array) })?;
        if decl.extents.len() != a.index.len() {
            return Err(SchedError::Syntax {
                line: 0,
                message: format!("`{}` has {} dimensions, indexed with {}", a.array, decl.extents.len(), a.index.len()),
            });
        }
        for (e, &extent) in a.index.iter().zip(&decl.extents) {
            let (lo, hi) = interval(e, scope)?;
            if lo < 0 || hi >= extent as i64 {
                return Err(SchedError::OutOfBounds(format!("{a}: index {e} spans [{lo}, {hi}], extent {extent}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LoopNest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Range of an integer index expression over the loop ranges in `scope`.
fn interval(e: &Expr, scope: &[(String, i64, i64)]) -> Result<(i64, i64), SchedError> {
    let bad = |m: String| SchedError::Syntax { line: 0, message: m };
    Ok(match e {
        Expr::Int(v) => (*v, *v),
        Expr::Var(v) => scope
            .iter()
            .rev()
            .find(|(s, ..)| s == v)
            .map(|(_, lo, hi)| (*lo, *hi))
            .ok_or_else(|| bad(format!("unknown variable `{v}`")))?,
        Expr::Neg(x) => {
            let (lo, hi) = interval(x, scope)?;
            (-hi, -lo)
        }
        Expr::Bin(op, l, r) => {
            let (a, b) = interval(l, scope)?;
            let (c, d) = interval(r, scope)?;
            match op {
                BinOp::Add => (a + c, b + d),
                BinOp::Sub => (a - d, b - c),
                BinOp::Mul => {
                    let p = [a * c, a * d, b * c, b * d];
                    (*p.iter().min().expect("four"), *p.iter().max().expect("four"))
                }
            }
        }
        Expr::Float(_) | Expr::Read(_) => return Err(bad(format!("index `{e}` is not an integer expression"))),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f32),
    Sym(&'static str),
}

fn tokenize(text: &str, line: usize) -> Result<Vec<Tok>, SchedError> {
    const SYMBOLS: &[&str] = &["+=", "(", ")", "[", "]", ",", ":", "=", "+", "-", "*", "@"];
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    'outer: while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'#' {
            break;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Ident(text[start..i].to_string()));
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            let lit = &text[start..i];
            let tok = if lit.contains('.') {
                lit.parse().map(Tok::Float).ok()
            } else {
                lit.parse().map(Tok::Int).ok()
            };
            out.push(tok.ok_or_else(|| SchedError::Syntax { line, message: format!("bad number `{lit}`") })?);
            continue;
        }
        for s in SYMBOLS {
            if text[i..].starts_with(s) {
                out.push(Tok::Sym(s));
                i += s.len();
                continue 'outer;
            }
        }
        return Err(SchedError::Syntax { line, message: format!("unexpected character `{}`", &text[i..i + 1]) });
    }
    Ok(out)
}

struct Cursor {
    toks: Vec<Tok>,
    pos: usize,
    line: usize,
}

impl Cursor {
    fn err(&self, message: impl Into<String>) -> SchedError {
        SchedError::Syntax { line: self.line, message: message.into() }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, sym: &str) -> Result<(), SchedError> {
        if self.eat(sym) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{sym}`")))
        }
    }

    fn ident(&mut self) -> Result<String, SchedError> {
        match self.peek().cloned() {
            Some(Tok::Ident(s)) => {
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err("expected a name")),
        }
    }

    fn keyword(&mut self, word: &str) -> Result<(), SchedError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == word => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("expected `{word}`"))),
        }
    }

    fn int(&mut self) -> Result<i64, SchedError> {
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(v)
            }
            _ => Err(self.err("expected an integer")),
        }
    }

    fn done(&self) -> Result<(), SchedError> {
        if self.pos == self.toks.len() {
            Ok(())
        } else {
            Err(self.err(format!("unexpected trailing `{:?}`", self.toks[self.pos])))
        }
    }

    fn expr(&mut self) -> Result<Expr, SchedError> {
        let mut e = self.term()?;
        loop {
            let op = if self.eat("+") {
                BinOp::Add
            } else if self.eat("-") {
                BinOp::Sub
            } else {
                return Ok(e);
            };
            e = Expr::Bin(op, Box::new(e), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, SchedError> {
        let mut e = self.unary()?;
        while self.eat("*") {
            e = Expr::product(e, self.unary()?);
        }
        Ok(e)
    }

    fn unary(&mut self) -> Result<Expr, SchedError> {
        if self.eat("-") {
            return Ok(match self.unary()? {
                Expr::Int(v) => Expr::Int(-v),
                Expr::Float(v) => Expr::Float(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(Expr::Int(v))
            }
            Some(Tok::Float(v)) => {
                self.pos += 1;
                Ok(Expr::Float(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat("[") {
                    Ok(Expr::Read(self.index(name)?))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(")")?;
                Ok(e)
            }
            _ => Err(self.err("expected an expression")),
        }
    }

    /// Parses `i, j]` after `name[`.
    fn index(&mut self, array: String) -> Result<Access, SchedError> {
        let mut index = vec![self.expr()?];
        while self.eat(",") {
            index.push(self.expr()?);
        }
        self.expect("]")?;
        Ok(Access { array, index })
    }

    fn bound(&mut self) -> Result<i64, SchedError> {
        let e = self.expr()?;
        match e.simplify(true) {
            Expr::Int(v) => Ok(v),
            other => Err(SchedError::NonConstantBound(other.to_string())),
        }
    }
}

/// Splits text into logical lines `(first line number, indent, text)`,
/// joining physical lines while brackets are open.
fn logical_lines(text: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut pending: Option<(usize, usize, String)> = None;
    let mut depth: i32 = 0;
    for (n, raw) in text.lines().enumerate() {
        let code = raw.split('#').next().unwrap_or("");
        if pending.is_none() && code.trim().is_empty() {
            continue;
        }
        let entry = pending.get_or_insert_with(|| (n + 1, code.len() - code.trim_start().len(), String::new()));
        if !entry.2.is_empty() {
            entry.2.push(' ');
        }
        entry.2.push_str(code.trim());
        for c in code.chars() {
            match c {
                '(' | '[' => depth += 1,
                ')' | ']' => depth -= 1,
                _ => {}
            }
        }
        if depth <= 0 {
            depth = 0;
            out.extend(pending.take());
        }
    }
    out.extend(pending);
    out
}

fn parse_header(c: &mut Cursor) -> Result<(String, Vec<ArrayDecl>), SchedError> {
    c.keyword("def")?;
    let name = c.ident()?;
    c.expect("(")?;
    let mut arrays = Vec::new();
    if !c.eat(")") {
        loop {
            let param = c.ident()?;
            c.expect(":")?;
            let ty = c.ident()?;
            if ty != "f32" {
                return Err(c.err(format!("`{param}` has unsupported type `{ty}`")));
            }
            c.expect("[")?;
            let mut extents = Vec::new();
            loop {
                let v = c.int()?;
                if v <= 0 {
                    return Err(c.err(format!("`{param}` has a non-positive extent")));
                }
                extents.push(v as usize);
                if !c.eat(",") {
                    break;
                }
            }
            c.expect("]")?;
            let memory = if c.eat("@") { c.ident()? } else { "DRAM".to_string() };
            if arrays.iter().any(|a: &ArrayDecl| a.name == param) {
                return Err(c.err(format!("parameter `{param}` declared twice")));
            }
            arrays.push(ArrayDecl { name: param, extents, memory });
            if c.eat(")") {
                break;
            }
            c.expect(",")?;
        }
    }
    c.expect(":")?;
    c.done()?;
    Ok((name, arrays))
}

fn parse_stmt_line(c: &mut Cursor) -> Result<(Stmt, bool), SchedError> {
    if matches!(c.peek(), Some(Tok::Ident(s)) if s == "for") {
        c.pos += 1;
        let var = c.ident()?;
        c.keyword("in")?;
        c.keyword("seq")?;
        c.expect("(")?;
        let lo = c.bound()?;
        c.expect(",")?;
        let hi = c.bound()?;
        c.expect(")")?;
        c.expect(":")?;
        c.done()?;
        return Ok((Stmt::Loop(Loop { var, lo, hi, body: Vec::new() }), true));
    }
    let array = c.ident()?;
    c.expect("[")?;
    let dst = c.index(array)?;
    let accumulate = if c.eat("+=") {
        true
    } else {
        c.expect("=")?;
        false
    };
    let rhs = c.expr()?;
    c.done()?;
    Ok((if accumulate { Stmt::Accumulate { dst, rhs } } else { Stmt::Assign { dst, rhs } }, false))
}

/// Parses a kernel in the `seq`-loop dialect and validates it.
pub fn parse_kernel(text: &str) -> Result<LoopNest, SchedError> {
    let lines = logical_lines(text);
    let Some((first_line, header_indent, header)) = lines.first() else {
        return Err(SchedError::Syntax { line: 0, message: "empty input".into() });
    };
    let mut c = Cursor { toks: tokenize(header, *first_line)?, pos: 0, line: *first_line };
    let (name, arrays) = parse_header(&mut c)?;

    // frames of (indent, open loop, statements so far); the root frame has no loop
    let mut stack: Vec<(usize, Option<Loop>, Vec<Stmt>)> = vec![(usize::MAX, None, Vec::new())];
    let mut expect_deeper = true;
    for (line, indent, text) in &lines[1..] {
        let mut c = Cursor { toks: tokenize(text, *line)?, pos: 0, line: *line };
        let (stmt, opens) = parse_stmt_line(&mut c)?;
        if expect_deeper {
            let parent = if stack.len() >= 2 { stack[stack.len() - 2].0 } else { *header_indent };
            if *indent <= parent {
                return Err(SchedError::Syntax { line: *line, message: "expected an indented block".into() });
            }
            stack.last_mut().expect("root").0 = *indent;
        } else {
            while stack.len() > 1 && *indent < stack.last().expect("root").0 {
                close(&mut stack);
            }
            if *indent != stack.last().expect("root").0 {
                return Err(SchedError::Syntax { line: *line, message: "inconsistent indentation".into() });
            }
        }
        expect_deeper = opens;
        match stmt {
            Stmt::Loop(l) if opens => stack.push((usize::MAX, Some(l), Vec::new())),
            s => stack.last_mut().expect("root").2.push(s),
        }
    }
    if expect_deeper {
        return Err(match stack.last().and_then(|f| f.1.as_ref()) {
            Some(l) => SchedError::Syntax { line: 0, message: format!("loop `{}` has no body", l.var) },
            None => SchedError::Syntax { line: 0, message: "kernel body is empty".into() },
        });
    }
    while stack.len() > 1 {
        close(&mut stack);
    }
    let body = stack.pop().expect("root").2;
    let nest = LoopNest { name, arrays, body };
    nest.validate()?;
    Ok(nest)
}

fn close(stack: &mut Vec<(usize, Option<Loop>, Vec<Stmt>)>) {
    let (_, l, body) = stack.pop().expect("open loop");
    let mut l = l.expect("non-root frame has a loop");
    l.body = body;
    stack.last_mut().expect("root").2.push(Stmt::Loop(l));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_round_trip() {
        let text = "def f(x: f32[4] @ DRAM):\n    for i in seq(0, 4):\n        x[i] = (x[i] + 1.0) * -x[3 - i]\n";
        let k = parse_kernel(text).unwrap();
        assert_eq!(k.render(), text);
    }

    #[test]
    fn affine_forms() {
        let e = Expr::sum(Expr::var("a"), Expr::product(Expr::Int(16), Expr::var("b")));
        let (c, m) = e.affine().unwrap();
        assert_eq!(c, 0);
        assert_eq!(m["b"], 16);
        assert!(Expr::product(Expr::var("a"), Expr::var("b")).affine().is_none());
    }

    #[test]
    fn rejects_bad_kernels() {
        assert!(parse_kernel("def f(x: f32[4] @ DRAM):\n").is_err());
        let oob = "def f(x: f32[4] @ DRAM):\n    for i in seq(0, 5):\n        x[i] = 0.0\n";
        assert!(matches!(parse_kernel(oob), Err(SchedError::OutOfBounds(_))));
        let nonconst = "def f(x: f32[4] @ DRAM):\n    for i in seq(0, 4):\n        for j in seq(0, i):\n            x[j] = 0.0\n";
        assert!(matches!(parse_kernel(nonconst), Err(SchedError::NonConstantBound(_))));
    }
}
