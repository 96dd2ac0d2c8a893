use indexmap::IndexMap;

use super::{
    Activation, BufferTable, ComputeArgs, Dataflow, DramRef, Instruction, IsaError, LocalAddr, Program,
    SENTINEL_ADDR,
};

const MAX_LOOP_ITERATIONS: usize = 100_000;
/// Upper bound on loop iterations summed over the whole program.
const MAX_TOTAL_ITERATIONS: usize = 2_000_000;
/// Upper bound on the unrolled instruction count of one program.
pub const MAX_INSTRUCTIONS: usize = 262_144;

const PREDEFINED: &[(&str, i64)] = &[
    ("OUTPUT_STATIONARY", 0),
    ("WEIGHT_STATIONARY", 1),
    ("NO_ACTIVATION", 0),
    ("RELU", 1),
    ("LAYERNORM", 2),
    ("IGELU", 3),
    ("SOFTMAX", 4),
    ("true", 1),
    ("false", 0),
];

const TYPE_NAMES: &[&str] = &["uint32_t", "int", "uint64_t", "size_t", "unsigned", "int32_t", "uint"];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Punct(&'static str),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
}

const PUNCTS: &[&str] = &[
    "<<=", ">>=", "<<", ">>", "<=", ">=", "==", "!=", "&&", "||", "++", "--", "+=", "-=", "*=", "(", ")", "{",
    "}", ";", ",", "+", "-", "*", "/", "%", "|", "&", "^", "<", ">", "=", "!", "~", "?", ":",
];

fn lex(text: &str) -> Result<Vec<Token>, IsaError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1;
    let mut at_line_start = true;
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            line += 1;
            i += 1;
            at_line_start = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'#' && at_line_start {
            // preprocessor directive: skip the line
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        at_line_start = false;
        if text[i..].starts_with("//") {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if text[i..].starts_with("/*") {
            let end = text[i + 2..]
                .find("*/")
                .ok_or_else(|| IsaError::syntax(line, "unterminated block comment"))?;
            line += text[i..i + 2 + end].matches('\n').count();
            i += end + 4;
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let (radix, digits_start) = if text[i..].starts_with("0x") || text[i..].starts_with("0X") {
                (16, i + 2)
            } else {
                (10, i)
            };
            i = digits_start;
            while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                i += 1;
            }
            let mut digits = &text[digits_start..i];
            digits = digits.trim_end_matches(['u', 'U', 'l', 'L']);
            let value = i64::from_str_radix(digits, radix)
                .map_err(|_| IsaError::syntax(line, format!("bad integer literal `{}`", &text[start..i])))?;
            out.push(Token { tok: Tok::Int(value), line });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(text[start..i].to_string()), line });
            continue;
        }
        match PUNCTS.iter().find(|p| text[i..].starts_with(**p)) {
            Some(p) => {
                out.push(Token { tok: Tok::Punct(p), line });
                i += p.len();
            }
            None => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(IsaError::syntax(line, format!("unexpected character `{ch}`")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Expr {
    Int(i64),
    Ident(String, usize),
    SizeofFloat,
    Unary(&'static str, Box<Expr>),
    Binary(&'static str, Box<Expr>, Box<Expr>),
    Ternary(Box<Expr>, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone)]
enum Step {
    Add(Expr),
    Sub(Expr),
    Set(Expr),
}

#[derive(Debug, Clone)]
enum Stmt {
    Decl { name: String, value: Expr },
    Assign { name: String, value: Expr, line: usize },
    Call { name: String, args: Vec<Expr>, line: usize },
    For { var: String, init: Expr, cond: Expr, step: Step, body: Vec<Stmt>, line: usize },
    If { cond: Expr, then: Vec<Stmt>, otherwise: Vec<Stmt> },
    Block(Vec<Stmt>),
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|t| t.line)
            .unwrap_or(1)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.tok)
    }

    fn peek_at(&self, offset: usize) -> Option<&Tok> {
        self.toks.get(self.pos + offset).map(|t| &t.tok)
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Some(Tok::Punct(q)) if *q == p)
    }

    fn is_ident(&self, name: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == name)
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), IsaError> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            Err(IsaError::syntax(self.line(), format!("expected `{p}`, found {}", self.describe())))
        }
    }

    fn expect_ident(&mut self) -> Result<String, IsaError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(IsaError::syntax(self.line(), format!("expected identifier, found {}", self.describe()))),
        }
    }

    fn describe(&self) -> String {
        match self.peek() {
            None => "end of input".to_string(),
            Some(Tok::Ident(s)) => format!("`{s}`"),
            Some(Tok::Int(v)) => format!("`{v}`"),
            Some(Tok::Punct(p)) => format!("`{p}`"),
        }
    }

    fn skip_type_prefix(&mut self) -> bool {
        let mut skipped = false;
        while let Some(Tok::Ident(s)) = self.peek() {
            if s == "static" || s == "const" || s == "volatile" || TYPE_NAMES.contains(&s.as_str()) {
                self.pos += 1;
                skipped = true;
            } else {
                break;
            }
        }
        skipped
    }

    fn program(&mut self) -> Result<Vec<Stmt>, IsaError> {
        let mut stmts = Vec::new();
        while self.peek().is_some() {
            if self.is_ident("void") {
                stmts.extend(self.function()?);
            } else {
                stmts.push(self.statement()?);
            }
        }
        Ok(stmts)
    }

    /// `void name(params) { body }`; only the body matters.
    fn function(&mut self) -> Result<Vec<Stmt>, IsaError> {
        self.pos += 1;
        self.expect_ident()?;
        self.expect_punct("(")?;
        let mut depth = 1;
        while depth > 0 {
            match self.peek() {
                None => return Err(IsaError::syntax(self.line(), "unterminated parameter list")),
                Some(Tok::Punct("(")) => depth += 1,
                Some(Tok::Punct(")")) => depth -= 1,
                _ => {}
            }
            self.pos += 1;
        }
        if self.eat_punct(";") {
            return Ok(Vec::new());
        }
        self.block()
    }

    fn block(&mut self) -> Result<Vec<Stmt>, IsaError> {
        self.expect_punct("{")?;
        let mut stmts = Vec::new();
        while !self.is_punct("}") {
            if self.peek().is_none() {
                return Err(IsaError::syntax(self.line(), "missing `}`"));
            }
            stmts.push(self.statement()?);
        }
        self.pos += 1;
        Ok(stmts)
    }

    fn body(&mut self) -> Result<Vec<Stmt>, IsaError> {
        if self.is_punct("{") {
            self.block()
        } else {
            Ok(vec![self.statement()?])
        }
    }

    fn statement(&mut self) -> Result<Stmt, IsaError> {
        let line = self.line();
        if self.eat_punct(";") {
            return Ok(Stmt::Block(Vec::new()));
        }
        if self.is_punct("{") {
            return Ok(Stmt::Block(self.block()?));
        }
        if self.is_ident("for") {
            return self.for_stmt();
        }
        if self.is_ident("if") {
            self.pos += 1;
            self.expect_punct("(")?;
            let cond = self.expr()?;
            self.expect_punct(")")?;
            let then = self.body()?;
            let otherwise = if self.is_ident("else") {
                self.pos += 1;
                self.body()?
            } else {
                Vec::new()
            };
            return Ok(Stmt::If { cond, then, otherwise });
        }
        if self.is_ident("return") {
            self.pos += 1;
            self.expect_punct(";")?;
            return Ok(Stmt::Block(Vec::new()));
        }
        if self.skip_type_prefix() {
            let name = self.expect_ident()?;
            self.expect_punct("=")?;
            let value = self.expr()?;
            self.expect_punct(";")?;
            return Ok(Stmt::Decl { name, value });
        }
        let name = self.expect_ident()?;
        if self.eat_punct("(") {
            let mut args = Vec::new();
            if !self.eat_punct(")") {
                loop {
                    args.push(self.expr()?);
                    if self.eat_punct(")") {
                        break;
                    }
                    self.expect_punct(",")?;
                }
            }
            self.expect_punct(";")?;
            return Ok(Stmt::Call { name, args, line });
        }
        if self.eat_punct("=") {
            let value = self.expr()?;
            self.expect_punct(";")?;
            return Ok(Stmt::Assign { name, value, line });
        }
        Err(IsaError::syntax(line, format!("unexpected {} after `{name}`", self.describe())))
    }

    fn for_stmt(&mut self) -> Result<Stmt, IsaError> {
        let line = self.line();
        self.pos += 1;
        self.expect_punct("(")?;
        self.skip_type_prefix();
        let var = self.expect_ident()?;
        self.expect_punct("=")?;
        let init = self.expr()?;
        self.expect_punct(";")?;
        let cond = self.expr()?;
        self.expect_punct(";")?;
        let step = self.step(&var)?;
        self.expect_punct(")")?;
        let body = self.body()?;
        Ok(Stmt::For { var, init, cond, step, body, line })
    }

    fn step(&mut self, var: &str) -> Result<Step, IsaError> {
        let line = self.line();
        if self.eat_punct("++") || self.eat_punct("--") {
            let inc = matches!(self.toks[self.pos - 1].tok, Tok::Punct("++"));
            let name = self.expect_ident()?;
            check_step_var(&name, var, line)?;
            return Ok(if inc { Step::Add(Expr::Int(1)) } else { Step::Sub(Expr::Int(1)) });
        }
        let name = self.expect_ident()?;
        check_step_var(&name, var, line)?;
        if self.eat_punct("++") {
            Ok(Step::Add(Expr::Int(1)))
        } else if self.eat_punct("--") {
            Ok(Step::Sub(Expr::Int(1)))
        } else if self.eat_punct("+=") {
            Ok(Step::Add(self.expr()?))
        } else if self.eat_punct("-=") {
            Ok(Step::Sub(self.expr()?))
        } else if self.eat_punct("=") {
            Ok(Step::Set(self.expr()?))
        } else {
            Err(IsaError::syntax(line, "unsupported loop step"))
        }
    }

    fn expr(&mut self) -> Result<Expr, IsaError> {
        let cond = self.binary(0)?;
        if self.eat_punct("?") {
            let a = self.expr()?;
            self.expect_punct(":")?;
            let b = self.expr()?;
            return Ok(Expr::Ternary(Box::new(cond), Box::new(a), Box::new(b)));
        }
        Ok(cond)
    }

    fn binary(&mut self, level: usize) -> Result<Expr, IsaError> {
        const LEVELS: &[&[&str]] = &[
            &["||"],
            &["&&"],
            &["|"],
            &["^"],
            &["&"],
            &["==", "!="],
            &["<", "<=", ">", ">="],
            &["<<", ">>"],
            &["+", "-"],
            &["*", "/", "%"],
        ];
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary(level + 1)?;
        loop {
            let op = match self.peek() {
                Some(Tok::Punct(p)) if LEVELS[level].contains(p) => *p,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.binary(level + 1)?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, IsaError> {
        for op in ["-", "+", "!", "~"] {
            if self.eat_punct(op) {
                let inner = self.unary()?;
                return Ok(Expr::Unary(op_static(op), Box::new(inner)));
            }
        }
        // casts like `(uint32_t) x`
        if self.is_punct("(") {
            if let Some(Tok::Ident(s)) = self.peek_at(1) {
                if TYPE_NAMES.contains(&s.as_str()) && matches!(self.peek_at(2), Some(Tok::Punct(")"))) {
                    self.pos += 3;
                    return self.unary();
                }
            }
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, IsaError> {
        let line = self.line();
        match self.peek().cloned() {
            Some(Tok::Int(v)) => {
                self.pos += 1;
                Ok(Expr::Int(v))
            }
            Some(Tok::Punct("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_punct(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) if name == "sizeof" => {
                self.pos += 1;
                self.expect_punct("(")?;
                let ty = self.expect_ident()?;
                self.expect_punct(")")?;
                match ty.as_str() {
                    "float" | "int32_t" | "uint32_t" | "int" => Ok(Expr::SizeofFloat),
                    other => Err(IsaError::syntax(line, format!("unsupported sizeof({other})"))),
                }
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.is_punct("(") {
                    return Err(IsaError::syntax(line, format!("call to `{name}` inside an expression")));
                }
                Ok(Expr::Ident(name, line))
            }
            _ => Err(IsaError::syntax(line, format!("expected expression, found {}", self.describe()))),
        }
    }
}

fn op_static(op: &str) -> &'static str {
    PUNCTS.iter().find(|p| **p == op).copied().unwrap_or("?")
}

fn check_step_var(name: &str, var: &str, line: usize) -> Result<(), IsaError> {
    if name == var {
        Ok(())
    } else {
        Err(IsaError::syntax(line, format!("loop step updates `{name}` instead of `{var}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Val {
    Int(i64),
    Ptr(String, i64),
}

struct Evaluator<'a> {
    buffers: &'a BufferTable,
    symbols: IndexMap<String, u32>,
    loop_vars: Vec<(String, i64)>,
    instructions: Vec<Instruction>,
    total_iterations: usize,
}

impl<'a> Evaluator<'a> {
    fn lookup(&self, name: &str, line: usize) -> Result<Val, IsaError> {
        if let Some((_, v)) = self.loop_vars.iter().rev().find(|(n, _)| n == name) {
            return Ok(Val::Int(*v));
        }
        if let Some(v) = self.symbols.get(name) {
            return Ok(Val::Int(i64::from(*v)));
        }
        if self.buffers.contains_key(name) {
            return Ok(Val::Ptr(name.to_string(), 0));
        }
        if let Some((_, v)) = PREDEFINED.iter().find(|(n, _)| *n == name) {
            return Ok(Val::Int(*v));
        }
        let _ = line;
        Err(IsaError::UnboundSymbol(name.to_string()))
    }

    fn eval(&self, e: &Expr) -> Result<Val, IsaError> {
        Ok(match e {
            Expr::Int(v) => Val::Int(*v),
            Expr::SizeofFloat => Val::Int(4),
            Expr::Ident(name, line) => self.lookup(name, *line)?,
            Expr::Unary(op, inner) => {
                let v = self.eval_int(inner)?;
                Val::Int(match *op {
                    "-" => v.wrapping_neg(),
                    "+" => v,
                    "!" => i64::from(v == 0),
                    _ => !v & 0xffff_ffff,
                })
            }
            Expr::Ternary(c, a, b) => {
                if self.eval_int(c)? != 0 {
                    self.eval(a)?
                } else {
                    self.eval(b)?
                }
            }
            Expr::Binary(op, l, r) => {
                let lv = self.eval(l)?;
                let rv = self.eval(r)?;
                match (op, lv, rv) {
                    (&"+", Val::Ptr(b, o), Val::Int(v)) | (&"+", Val::Int(v), Val::Ptr(b, o)) => {
                        Val::Ptr(b, o + v)
                    }
                    (&"-", Val::Ptr(b, o), Val::Int(v)) => Val::Ptr(b, o - v),
                    (_, Val::Int(a), Val::Int(b)) => Val::Int(int_op(op, a, b)?),
                    (op, _, _) => {
                        return Err(IsaError::syntax(0, format!("operator `{op}` is not valid on a buffer pointer")))
                    }
                }
            }
        })
    }

    fn eval_int(&self, e: &Expr) -> Result<i64, IsaError> {
        match self.eval(e)? {
            Val::Int(v) => Ok(v),
            Val::Ptr(b, _) => Err(IsaError::syntax(0, format!("buffer `{b}` used where an integer is required"))),
        }
    }

    fn run(&mut self, stmts: &[Stmt]) -> Result<(), IsaError> {
        for s in stmts {
            self.stmt(s)?;
        }
        Ok(())
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), IsaError> {
        match s {
            Stmt::Decl { name, value } => {
                let v = to_u32(self.eval_int(value)?, 0)?;
                self.symbols.insert(name.clone(), v);
            }
            Stmt::Assign { name, value, line } => {
                let v = self.eval_int(value)?;
                if let Some(slot) = self.loop_vars.iter_mut().rev().find(|(n, _)| n == name) {
                    slot.1 = v;
                } else if self.symbols.contains_key(name) {
                    self.symbols.insert(name.clone(), to_u32(v, *line)?);
                } else {
                    return Err(IsaError::UnboundSymbol(name.clone()));
                }
            }
            Stmt::Block(body) => self.run(body)?,
            Stmt::If { cond, then, otherwise } => {
                if self.eval_int(cond)? != 0 {
                    self.run(then)?;
                } else {
                    self.run(otherwise)?;
                }
            }
            Stmt::For { var, init, cond, step, body, line } => {
                let start = self.eval_int(init).map_err(|e| constant_bound(e, *line))?;
                self.loop_vars.push((var.clone(), start));
                let mut iterations = 0;
                loop {
                    let keep_going = self.eval_int(cond).map_err(|e| constant_bound(e, *line))?;
                    if keep_going == 0 {
                        break;
                    }
                    iterations += 1;
                    self.total_iterations += 1;
                    if self.total_iterations > MAX_TOTAL_ITERATIONS {
                        return Err(IsaError::NonConstantLoopBound(format!(
                            "loops exceed {MAX_TOTAL_ITERATIONS} iterations in total"
                        )));
                    }
                    if iterations > MAX_LOOP_ITERATIONS {
                        return Err(IsaError::NonConstantLoopBound(format!(
                            "loop on line {line} exceeds {MAX_LOOP_ITERATIONS} iterations"
                        )));
                    }
                    self.run(body)?;
                    let current = self.loop_vars.last().map(|(_, v)| *v).unwrap_or_default();
                    let next = match step {
                        Step::Add(e) => current + self.eval_int(e).map_err(|e| constant_bound(e, *line))?,
                        Step::Sub(e) => current - self.eval_int(e).map_err(|e| constant_bound(e, *line))?,
                        Step::Set(e) => self.eval_int(e).map_err(|e| constant_bound(e, *line))?,
                    };
                    if let Some(slot) = self.loop_vars.last_mut() {
                        slot.1 = next;
                    }
                }
                self.loop_vars.pop();
            }
            Stmt::Call { name, args, line } => {
                let instr = self.call(name, args, *line)?;
                if self.instructions.len() >= MAX_INSTRUCTIONS {
                    return Err(IsaError::ProgramTooLarge(MAX_INSTRUCTIONS));
                }
                self.instructions.push(instr);
            }
        }
        Ok(())
    }

    fn arity(&self, name: &str, args: &[Expr], n: usize, line: usize) -> Result<(), IsaError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(IsaError::syntax(line, format!("`{name}` takes {n} arguments, got {}", args.len())))
        }
    }

    fn u32_arg(&self, e: &Expr, line: usize) -> Result<u32, IsaError> {
        to_u32(self.eval_int(e).map_err(|err| with_line(err, line))?, line)
    }

    fn positive(&self, e: &Expr, what: &str, line: usize) -> Result<u32, IsaError> {
        let v = self.u32_arg(e, line)?;
        if v == 0 {
            return Err(IsaError::syntax(line, format!("{what} must be positive")));
        }
        Ok(v)
    }

    fn addr(&self, e: &Expr, line: usize) -> Result<LocalAddr, IsaError> {
        Ok(LocalAddr(self.u32_arg(e, line)?))
    }

    fn optional_addr(&self, e: &Expr, line: usize) -> Result<Option<LocalAddr>, IsaError> {
        let raw = self.u32_arg(e, line)?;
        Ok((raw != SENTINEL_ADDR).then_some(LocalAddr(raw)))
    }

    fn dram(&self, e: &Expr, line: usize) -> Result<DramRef, IsaError> {
        match self.eval(e).map_err(|err| with_line(err, line))? {
            Val::Ptr(buffer, offset) => {
                let element_offset = u32::try_from(offset)
                    .map_err(|_| IsaError::syntax(line, format!("negative offset into `{buffer}`")))?;
                Ok(DramRef { buffer, element_offset })
            }
            Val::Int(_) => Err(IsaError::syntax(line, "expected a DRAM buffer operand")),
        }
    }

    fn call(&self, name: &str, args: &[Expr], line: usize) -> Result<Instruction, IsaError> {
        let instr = match name {
            "config_ex" => {
                self.arity(name, args, 4, line)?;
                let df = self.u32_arg(&args[0], line)?;
                let act = self.u32_arg(&args[1], line)?;
                Instruction::ConfigEx {
                    dataflow: Dataflow::from_code(df)
                        .ok_or_else(|| IsaError::syntax(line, format!("invalid dataflow {df}")))?,
                    act: Activation::from_code(act)
                        .ok_or_else(|| IsaError::syntax(line, format!("invalid activation {act}")))?,
                    a_transpose: self.u32_arg(&args[2], line)? != 0,
                    b_transpose: self.u32_arg(&args[3], line)? != 0,
                }
            }
            "config_ld" => {
                self.arity(name, args, 2, line)?;
                let channel = self.u32_arg(&args[1], line)?;
                if channel > 2 {
                    return Err(IsaError::syntax(line, format!("config_ld id must be 0, 1 or 2, got {channel}")));
                }
                Instruction::ConfigLd { stride_bytes: self.u32_arg(&args[0], line)?, channel: channel as u8 }
            }
            "config_st" => {
                self.arity(name, args, 1, line)?;
                Instruction::ConfigSt { stride_bytes: self.u32_arg(&args[0], line)? }
            }
            "mvin" | "mvin2" | "mvin3" => {
                self.arity(name, args, 4, line)?;
                let channel = match name {
                    "mvin" => 0,
                    "mvin2" => 1,
                    _ => 2,
                };
                Instruction::Mvin {
                    channel,
                    dram: self.dram(&args[0], line)?,
                    local: self.addr(&args[1], line)?,
                    cols: self.positive(&args[2], "cols", line)?,
                    rows: self.positive(&args[3], "rows", line)?,
                }
            }
            "mvout" => {
                self.arity(name, args, 4, line)?;
                Instruction::Mvout {
                    dram: self.dram(&args[0], line)?,
                    local: self.addr(&args[1], line)?,
                    cols: self.positive(&args[2], "cols", line)?,
                    rows: self.positive(&args[3], "rows", line)?,
                }
            }
            "preload" => {
                self.arity(name, args, 6, line)?;
                Instruction::Preload {
                    b_local: self.optional_addr(&args[0], line)?,
                    c_local: self.addr(&args[1], line)?,
                    b_cols: self.positive(&args[2], "B_cols", line)?,
                    b_rows: self.positive(&args[3], "B_rows", line)?,
                    c_cols: self.positive(&args[4], "C_cols", line)?,
                    c_rows: self.positive(&args[5], "C_rows", line)?,
                }
            }
            "preload_zeros" => {
                self.arity(name, args, 1, line)?;
                Instruction::PreloadZeros { c_local: self.addr(&args[0], line)? }
            }
            "compute_preloaded" | "compute_accumulated" => {
                self.arity(name, args, 6, line)?;
                let c = ComputeArgs {
                    a_local: self.addr(&args[0], line)?,
                    d_local: self.optional_addr(&args[1], line)?,
                    a_cols: self.positive(&args[2], "A_cols", line)?,
                    a_rows: self.positive(&args[3], "A_rows", line)?,
                    d_cols: self.positive(&args[4], "bias_cols", line)?,
                    d_rows: self.positive(&args[5], "bias_rows", line)?,
                };
                if name == "compute_preloaded" {
                    Instruction::ComputePreloaded(c)
                } else {
                    Instruction::ComputeAccumulated(c)
                }
            }
            "fence" => {
                self.arity(name, args, 0, line)?;
                Instruction::Fence
            }
            other => return Err(IsaError::UnknownFunction(other.to_string())),
        };
        Ok(instr)
    }
}

fn with_line(err: IsaError, line: usize) -> IsaError {
    match err {
        IsaError::Syntax { line: 0, reason } => IsaError::Syntax { line, reason },
        other => other,
    }
}

fn constant_bound(err: IsaError, line: usize) -> IsaError {
    match err {
        IsaError::Syntax { reason, .. } => IsaError::NonConstantLoopBound(format!("line {line}: {reason}")),
        other => other,
    }
}

fn int_op(op: &str, a: i64, b: i64) -> Result<i64, IsaError> {
    Ok(match op {
        "+" => a.wrapping_add(b),
        "-" => a.wrapping_sub(b),
        "*" => a.wrapping_mul(b),
        "/" | "%" => {
            if b == 0 {
                return Err(IsaError::syntax(0, "division by zero"));
            }
            if op == "/" {
                a / b
            } else {
                a % b
            }
        }
        "|" => a | b,
        "&" => a & b,
        "^" => a ^ b,
        "<<" => {
            if !(0..63).contains(&b) {
                return Err(IsaError::syntax(0, format!("shift amount {b} out of range")));
            }
            a << b
        }
        ">>" => {
            if !(0..63).contains(&b) {
                return Err(IsaError::syntax(0, format!("shift amount {b} out of range")));
            }
            a >> b
        }
        "<" => i64::from(a < b),
        "<=" => i64::from(a <= b),
        ">" => i64::from(a > b),
        ">=" => i64::from(a >= b),
        "==" => i64::from(a == b),
        "!=" => i64::from(a != b),
        "&&" => i64::from(a != 0 && b != 0),
        "||" => i64::from(a != 0 || b != 0),
        other => return Err(IsaError::syntax(0, format!("unsupported operator `{other}`"))),
    })
}

fn to_u32(v: i64, line: usize) -> Result<u32, IsaError> {
    if (-(1i64 << 31)..(1i64 << 32)).contains(&v) {
        Ok(v as u32)
    } else {
        Err(IsaError::syntax(line, format!("value {v} does not fit in 32 bits")))
    }
}

fn parse_ast(text: &str) -> Result<Vec<Stmt>, IsaError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.program()
}

/// Parses program text against a buffer table, folding every operand and
/// unrolling `for`/`if` at parse time.
pub fn parse_program(text: &str, buffers: &BufferTable) -> Result<Program, IsaError> {
    let ast = parse_ast(text)?;
    let mut ev = Evaluator { buffers, symbols: IndexMap::new(), loop_vars: Vec::new(), instructions: Vec::new(), total_iterations: 0 };
    ev.run(&ast)?;
    Ok(Program { buffers: buffers.clone(), symbols: ev.symbols, instructions: ev.instructions })
}

/// [`parse_program`] followed by [`Program::validate`].
pub fn parse_program_checked(text: &str, buffers: &BufferTable, dim: u32) -> Result<Program, IsaError> {
    let p = parse_program(text, buffers)?;
    p.validate(dim)?;
    Ok(p)
}

/// Checks that `text` is well-formed without resolving names. Returns the
/// number of top-level statements.
pub fn check_syntax(text: &str) -> Result<usize, IsaError> {
    let ast = parse_ast(text)?;
    fn count(stmts: &[Stmt]) -> usize {
        stmts
            .iter()
            .map(|s| match s {
                Stmt::Block(b) => count(b),
                _ => 1,
            })
            .sum()
    }
    Ok(count(&ast))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{buffer_table, BufferDecl, BufferRole};

    fn table() -> BufferTable {
        buffer_table([
            BufferDecl::new("Bdyn", 12, 4, BufferRole::Input),
            BufferDecl::new("p", 12, 1, BufferRole::Input),
            BufferDecl::new("B_p", 4, 1, BufferRole::Output),
        ])
    }

    #[test]
    fn config_st_sizeof() {
        let p = parse_program("config_st(1 * sizeof(float));", &table()).unwrap();
        assert_eq!(p.instructions, vec![Instruction::ConfigSt { stride_bytes: 4 }]);
    }

    #[test]
    fn mvin_with_symbol() {
        let p = parse_program(
            "static uint32_t Bdyn_sp_addr = 0;\nmvin(Bdyn, Bdyn_sp_addr, 12, 4);",
            &table(),
        )
        .unwrap();
        assert_eq!(p.instructions, vec![Instruction::Mvin {
            channel: 0,
            dram: DramRef::new("Bdyn", 0),
            local: LocalAddr(0),
            cols: 12,
            rows: 4,
        }]);
        assert_eq!(p.symbols.get("Bdyn_sp_addr"), Some(&0));
    }

    #[test]
    fn empty_program() {
        let p = parse_program("", &table()).unwrap();
        assert!(p.instructions.is_empty());
        assert!(p.symbols.is_empty());
    }

    #[test]
    fn for_loop_unrolls() {
        let p = parse_program("for (int i = 0; i < 2; i++) { fence(); }", &table()).unwrap();
        assert_eq!(p.instructions, vec![Instruction::Fence, Instruction::Fence]);
    }

    #[test]
    fn if_else_picks_branch() {
        let src = "for (int k = 0; k < 8; k += 4) { if (k == 0) { fence(); } else { config_st(k); } }";
        let p = parse_program(src, &table()).unwrap();
        assert_eq!(p.instructions, vec![Instruction::Fence, Instruction::ConfigSt { stride_bytes: 4 }]);
    }

    #[test]
    fn pointer_arithmetic_in_elements() {
        let p = parse_program("mvin2(p + 0x8, 12 + 8, 1, 4);", &table()).unwrap();
        assert_eq!(p.instructions[0], Instruction::Mvin {
            channel: 1,
            dram: DramRef::new("p", 8),
            local: LocalAddr(20),
            cols: 1,
            rows: 4,
        });
    }

    #[test]
    fn accumulate_flag_precedence() {
        let src = "static uint32_t acc = 1 << 31;\npreload(12, acc | 1 << 30, 1, 4, 1, 4);\n\
                   compute_preloaded(0, 0xffffffff, 4, 4, 1, 4);";
        let p = parse_program(src, &table()).unwrap();
        match &p.instructions[0] {
            Instruction::Preload { c_local, b_local, .. } => {
                assert_eq!(c_local.0, 0xC000_0000);
                assert_eq!(*b_local, Some(LocalAddr(12)));
            }
            other => panic!("unexpected {other:?}"),
        }
        match &p.instructions[1] {
            Instruction::ComputePreloaded(c) => assert_eq!(c.d_local, None),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors() {
        assert_eq!(parse_program("foo(1);", &table()), Err(IsaError::UnknownFunction("foo".into())));
        assert_eq!(parse_program("mvin(q, 0, 1, 1);", &table()), Err(IsaError::UnboundSymbol("q".into())));
        assert!(matches!(parse_program("fence()", &table()), Err(IsaError::Syntax { line: 1, .. })));
        assert!(matches!(
            parse_program("for (int i = 0; i < n; i++) { fence(); }", &table()),
            Err(IsaError::UnboundSymbol(_))
        ));
        assert!(matches!(
            parse_program("for (int i = 0; i < p; i++) { fence(); }", &table()),
            Err(IsaError::NonConstantLoopBound(_))
        ));
        assert!(matches!(
            parse_program("for (int i = 0; i < 4; i += 0) { fence(); }", &table()),
            Err(IsaError::NonConstantLoopBound(_))
        ));
    }

    #[test]
    fn checked_parse_rejects_rows_over_dim() {
        let err = parse_program_checked("fence();\nmvin(Bdyn, 0, 4, 12);", &table(), 4).unwrap_err();
        assert_eq!(err, IsaError::RowsExceedDim { index: 1, rows: 12, dim: 4 });
    }

    #[test]
    fn function_wrapper_and_comments() {
        let src = "#include \"gemmini.h\"\nvoid test(Bdyn, p, B_p) {\n  /* block */ fence(); // done\n}\n";
        let p = parse_program(src, &table()).unwrap();
        assert_eq!(p.instructions, vec![Instruction::Fence]);
    }

    #[test]
    fn syntax_check_rejects_prose() {
        assert!(check_syntax("Here is the translated program").is_err());
        assert_eq!(check_syntax("fence();").unwrap(), 1);
    }
}
