//! Source-kernel reference semantics, shipped fixtures, test-case generation
//! and the verdict function.
//!
//! Every kernel is a matrix multiply `C = op(A) · op(B)`, optionally plus or
//! minus a bias `D`. Fixtures live in `fixtures/kernels/*.toml`, each with a
//! hand-written golden program.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{buffer_table, parse_program, BufferDecl, BufferRole, BufferTable, Program};
use crate::matrix::Matrix;
use crate::sim::{Machine, MachineConfig, SimError};

/// DRAM buffer holding `-I` (DIM × DIM), bound for kernels that subtract
/// their bias. The ISA has no negation or scaling, so `C = A·B - D` is only
/// expressible by multiplying with a negative identity taken from memory.
pub const NEG_IDENTITY: &str = "NEG_I";

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("invalid fixture: {0}")]
    InvalidFixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelOp {
    Matmul,
    MatmulBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Matvec,
    Matmat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub family: Family,
    pub op: KernelOp,
    pub i: usize,
    pub k: usize,
    pub j: usize,
    #[serde(default)]
    pub transpose_a: bool,
    #[serde(default)]
    pub transpose_b: bool,
    #[serde(default)]
    pub sub: bool,
    /// Name of the in-context example asset this kernel provides, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_context_example: Option<String>,
    pub a: String,
    pub b: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<String>,
    pub c: String,
}

impl KernelSpec {
    pub fn a_shape(&self) -> (usize, usize) {
        if self.transpose_a {
            (self.k, self.i)
        } else {
            (self.i, self.k)
        }
    }

    pub fn b_shape(&self) -> (usize, usize) {
        if self.transpose_b {
            (self.j, self.k)
        } else {
            (self.k, self.j)
        }
    }

    pub fn has_bias(&self) -> bool {
        self.op == KernelOp::MatmulBias
    }

    pub fn needs_neg_identity(&self) -> bool {
        self.has_bias() && self.sub
    }

    /// DRAM buffers in declaration order: A, B, D (if any), C, and `NEG_I`
    /// for subtracting kernels.
    pub fn buffer_table(&self, dim: usize) -> BufferTable {
        let mut decls = vec![
            BufferDecl::new(&self.a, self.a_shape().0, self.a_shape().1, BufferRole::Input),
            BufferDecl::new(&self.b, self.b_shape().0, self.b_shape().1, BufferRole::Input),
        ];
        if let Some(d) = &self.d {
            decls.push(BufferDecl::new(d, self.i, self.j, BufferRole::Bias));
        }
        decls.push(BufferDecl::new(&self.c, self.i, self.j, BufferRole::Output));
        if self.needs_neg_identity() {
            decls.push(BufferDecl::new(NEG_IDENTITY, dim, dim, BufferRole::Input));
        }
        buffer_table(decls)
    }

    /// Argument names of the `test` function, in order.
    pub fn params(&self) -> Vec<String> {
        let mut p = vec![self.a.clone(), self.b.clone()];
        p.extend(self.d.clone());
        p.push(self.c.clone());
        if self.needs_neg_identity() {
            p.push(NEG_IDENTITY.to_string());
        }
        p
    }

    /// One-sentence natural-language description used as the comment above
    /// the `test` function in prompts.
    pub fn describe(&self) -> String {
        let tr = |t: bool| if t { "transposed" } else { "not transposed" };
        let (i, k, j) = (self.i, self.k, self.j);
        if self.family == Family::Matvec && !self.has_bias() {
            return format!(
                "Multiplication of {i}x{k} matrix {}, {}, and {k}x{j} vector {}, {}. The matrix and vector are both \
                 stored in dram. The result is stored in the {i}x{j} vector {}. Systolic array size is 4x4 and each \
                 element is 4bytes.",
                self.a,
                tr(self.transpose_a),
                self.b,
                tr(self.transpose_b),
                self.c
            );
        }
        let mut s = format!(
            "Multiplication of {i}x{k} matrix {}, {}, and {k}x{j} matrix {}, {}",
            self.a,
            tr(self.transpose_a),
            self.b,
            tr(self.transpose_b)
        );
        if let Some(d) = &self.d {
            let verb = if self.sub { "minus" } else { "plus" };
            s.push_str(&format!(", {verb} {i}x{j} bias matrix {d}"));
        }
        s.push_str(&format!(
            ". The matrices are all stored in DRAM. The result is stored in the {i}x{j} matrix {}.",
            self.c
        ));
        if self.needs_neg_identity() {
            s.push_str(&format!(" {NEG_IDENTITY} is a 4x4 negative identity matrix stored in DRAM."));
        }
        s
    }

    /// The `test` function body calling the library routine.
    pub fn test_function(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let params = self.params().join(", ");
        let call = if self.has_bias() {
            format!(
                "tiled_matmul_outer_eigen_bias({}, {}, {}, {}, {}, {}, {}, {}, {}, {})",
                self.a,
                self.b,
                self.d.as_deref().unwrap_or("D"),
                self.c,
                self.i,
                self.k,
                self.j,
                b(self.transpose_a),
                b(self.transpose_b),
                b(self.sub)
            )
        } else {
            format!(
                "tiled_matmul_outer_eigen({}, {}, {}, {}, {}, {}, {}, {})",
                self.a,
                self.b,
                self.c,
                self.i,
                self.k,
                self.j,
                b(self.transpose_a),
                b(self.transpose_b)
            )
        };
        format!("void test({params}) {{\n    {call};\n}}\n")
    }

    /// Reference output for the given inputs.
    pub fn reference(&self, inputs: &BTreeMap<String, Matrix>) -> Result<Matrix, KernelError> {
        let get = |n: &str| inputs.get(n).ok_or_else(|| KernelError::ShapeMismatch(format!("missing input `{n}`")));
        let a = get(&self.a)?;
        let b = get(&self.b)?;
        match &self.d {
            Some(d) if self.has_bias() => {
                reference_matmul_bias(a, b, get(d)?, self.i, self.k, self.j, self.transpose_a, self.transpose_b, self.sub)
            }
            _ => reference_matmul(a, b, self.i, self.k, self.j, self.transpose_a, self.transpose_b),
        }
    }
}

fn check_shape(name: &str, m: &Matrix, want: (usize, usize)) -> Result<(), KernelError> {
    if m.shape() == want {
        Ok(())
    } else {
        Err(KernelError::ShapeMismatch(format!("{name} is {:?}, expected {want:?}", m.shape())))
    }
}

/// `C[i][j] = Σ_k op(A)[i][k] · op(B)[k][j]`, where `op` transposes the
/// stored matrix when the corresponding flag is set.
pub fn reference_matmul(
    a: &Matrix,
    b: &Matrix,
    i: usize,
    k: usize,
    j: usize,
    ta: bool,
    tb: bool,
) -> Result<Matrix, KernelError> {
    check_shape("A", a, if ta { (k, i) } else { (i, k) })?;
    check_shape("B", b, if tb { (j, k) } else { (k, j) })?;
    let mut c = Matrix::zeros(i, j);
    for ii in 0..i {
        for jj in 0..j {
            let mut acc = 0.0f32;
            for kk in 0..k {
                let x = if ta { a.get(kk, ii) } else { a.get(ii, kk) };
                let y = if tb { b.get(jj, kk) } else { b.get(kk, jj) };
                acc += x * y;
            }
            c.set(ii, jj, acc);
        }
    }
    Ok(c)
}

/// [`reference_matmul`] plus `D` (or minus `D` when `sub`).
#[allow(clippy::too_many_arguments)]
pub fn reference_matmul_bias(
    a: &Matrix,
    b: &Matrix,
    d: &Matrix,
    i: usize,
    k: usize,
    j: usize,
    ta: bool,
    tb: bool,
    sub: bool,
) -> Result<Matrix, KernelError> {
    check_shape("D", d, (i, j))?;
    let mut c = reference_matmul(a, b, i, k, j, ta, tb)?;
    for (x, y) in c.data.iter_mut().zip(&d.data) {
        if sub {
            *x -= y;
        } else {
            *x += y;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub inputs: BTreeMap<String, Matrix>,
    pub expected: Matrix,
    pub seed: u64,
}

fn case_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-8i32..=8) as f32).collect())
}

/// `count` deterministic test cases with integer entries in `[-8, 8]`.
pub fn generate_testcases(spec: &KernelSpec, seed: u64, count: usize, dim: usize) -> Vec<TestCase> {
    (0..count)
        .map(|index| {
            let s = case_seed(seed, index);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut inputs = BTreeMap::new();
            let (ar, ac) = spec.a_shape();
            inputs.insert(spec.a.clone(), random_matrix(&mut rng, ar, ac));
            let (br, bc) = spec.b_shape();
            inputs.insert(spec.b.clone(), random_matrix(&mut rng, br, bc));
            if let Some(d) = &spec.d {
                inputs.insert(d.clone(), random_matrix(&mut rng, spec.i, spec.j));
            }
            let expected = spec.reference(&inputs).expect("generated inputs match the spec shapes");
            if spec.needs_neg_identity() {
                let mut neg = Matrix::identity(dim);
                neg.data.iter_mut().for_each(|x| *x = -*x);
                inputs.insert(NEG_IDENTITY.to_string(), neg);
            }
            TestCase { inputs, expected, seed: s }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Failure {
    ParseError { message: String },
    ExecError { case: usize, index: Option<usize>, error: String, message: String },
    WrongResult { case: usize, row: usize, col: usize, got: f32, want: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseOutcome {
    Pass,
    ExecError,
    WrongResult,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub failure: Option<Failure>,
    pub outcomes: Vec<CaseOutcome>,
}

impl Verdict {
    pub fn parse_error(message: impl Into<String>) -> Self {
        Verdict { passed: false, failure: Some(Failure::ParseError { message: message.into() }), outcomes: Vec::new() }
    }

    /// Short label such as `pass`, `parse_error` or `exec_error:RowsExceedDim`.
    pub fn label(&self) -> String {
        match &self.failure {
            None => "pass".into(),
            Some(Failure::ParseError { .. }) => "parse_error".into(),
            Some(Failure::ExecError { error, .. }) => format!("exec_error:{error}"),
            Some(Failure::WrongResult { .. }) => "wrong_result".into(),
        }
    }
}

fn close(got: f32, want: f32, exact: bool) -> bool {
    if exact {
        got == want
    } else {
        (got - want).abs() <= 1e-4 * want.abs().max(1.0)
    }
}

fn run_case(p: &Program, spec: &KernelSpec, case: &TestCase, cfg: MachineConfig) -> Result<(), (CaseOutcome, Failure)> {
    let exec_failure = |index: Option<usize>, error: &str, message: String| {
        (CaseOutcome::ExecError, Failure::ExecError { case: 0, index, error: error.to_string(), message })
    };
    let mut m = Machine::with_buffers(cfg, &p.buffers, &case.inputs).map_err(|e| {
        let name = match &e {
            SimError::ShapeMismatch { .. } => "ShapeMismatch",
            SimError::UnknownBuffer(_) => "UnknownBuffer",
            _ => "ConfigInvalid",
        };
        exec_failure(None, name, e.to_string())
    })?;
    if let Err(e) = m.execute(p) {
        return Err(match &e {
            SimError::Exec { index, kind } => exec_failure(Some(*index), kind.name(), e.to_string()),
            other => exec_failure(None, "Simulator", other.to_string()),
        });
    }
    let got = m.read_output(&spec.c).map_err(|e| exec_failure(None, "UnknownBuffer", e.to_string()))?;
    let exact = case.expected.data.iter().all(|v| v.fract() == 0.0);
    for r in 0..case.expected.rows {
        for c in 0..case.expected.cols {
            let (g, w) = (got.get(r, c), case.expected.get(r, c));
            if !close(g, w, exact) {
                return Err((CaseOutcome::WrongResult, Failure::WrongResult { case: 0, row: r, col: c, got: g, want: w }));
            }
        }
    }
    Ok(())
}

fn verify_inner(p: &Program, spec: &KernelSpec, cases: &[TestCase], cfg: MachineConfig, fast: bool) -> Verdict {
    let mut outcomes = Vec::with_capacity(cases.len());
    let mut failure = None;
    for (idx, case) in cases.iter().enumerate() {
        if fast && failure.is_some() {
            outcomes.push(CaseOutcome::Skipped);
            continue;
        }
        match run_case(p, spec, case, cfg) {
            Ok(()) => outcomes.push(CaseOutcome::Pass),
            Err((outcome, mut f)) => {
                match &mut f {
                    Failure::ExecError { case, .. } | Failure::WrongResult { case, .. } => *case = idx,
                    Failure::ParseError { .. } => {}
                }
                outcomes.push(outcome);
                failure.get_or_insert(f);
            }
        }
    }
    Verdict { passed: failure.is_none(), failure, outcomes }
}

/// Runs `p` on every case and compares the output buffer with the expected
/// matrix: bit-exact for integer-valued expectations, relative `1e-4`
/// otherwise.
pub fn verify_program(p: &Program, spec: &KernelSpec, cases: &[TestCase], cfg: MachineConfig) -> Verdict {
    verify_inner(p, spec, cases, cfg, false)
}

/// Like [`verify_program`] but stops at the first failing case.
pub fn verify_program_fast(p: &Program, spec: &KernelSpec, cases: &[TestCase], cfg: MachineConfig) -> Verdict {
    verify_inner(p, spec, cases, cfg, true)
}

/// Parses `text` against the spec's buffers and verifies it; parse errors
/// become a `ParseError` verdict.
pub fn verify_text(text: &str, spec: &KernelSpec, cases: &[TestCase], cfg: MachineConfig, fast: bool) -> Verdict {
    match parse_program(text, &spec.buffer_table(cfg.dim)) {
        Ok(p) => verify_inner(&p, spec, cases, cfg, fast),
        Err(e) => Verdict::parse_error(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFixture {
    #[serde(flatten)]
    pub spec: KernelSpec,
    pub golden: String,
}

impl KernelFixture {
    pub fn from_toml(text: &str) -> Result<Self, KernelError> {
        toml::from_str(text).map_err(|e| KernelError::InvalidFixture(e.to_string()))
    }

    pub fn golden_program(&self, dim: usize) -> Program {
        parse_program(&self.golden, &self.spec.buffer_table(dim))
            .unwrap_or_else(|e| panic!("golden program of {} does not parse: {e}", self.spec.name))
    }
}

const FIXTURE_SOURCES: &[&str] = &[
    include_str!("../fixtures/kernels/gv1.toml"),
    include_str!("../fixtures/kernels/gv2.toml"),
    include_str!("../fixtures/kernels/gv3.toml"),
    include_str!("../fixtures/kernels/gv4.toml"),
    include_str!("../fixtures/kernels/gm1.toml"),
    include_str!("../fixtures/kernels/gm2.toml"),
    include_str!("../fixtures/kernels/gm3.toml"),
    include_str!("../fixtures/kernels/gm4.toml"),
    include_str!("../fixtures/kernels/gm5.toml"),
    include_str!("../fixtures/kernels/gm6.toml"),
    include_str!("../fixtures/kernels/gm7.toml"),
];

/// All shipped kernel fixtures: four matrix-vector and seven matrix-matrix.
pub fn fixtures() -> &'static [KernelFixture] {
    static FIXTURES: OnceLock<Vec<KernelFixture>> = OnceLock::new();
    FIXTURES.get_or_init(|| {
        FIXTURE_SOURCES
            .iter()
            .map(|src| KernelFixture::from_toml(src).expect("shipped fixture parses"))
            .collect()
    })
}

pub fn fixture(name: &str) -> Result<&'static KernelFixture, KernelError> {
    fixtures()
        .iter()
        .find(|f| f.spec.name == name)
        .ok_or_else(|| KernelError::UnknownKernel(name.to_string()))
}

/// The nine translation targets: every matrix-vector kernel plus the
/// matrix-matrix kernels that are not in-context examples.
pub fn target_kernels() -> impl Iterator<Item = &'static KernelFixture> {
    fixtures().iter().filter(|f| f.spec.family == Family::Matvec || f.spec.in_context_example.is_none())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_transpose() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let i = Matrix::identity(2);
        assert_eq!(reference_matmul(&i, &m, 2, 2, 2, false, false).unwrap(), m);
        assert_eq!(reference_matmul(&m, &i, 2, 2, 2, true, false).unwrap(), Matrix::from_rows(&[&[1.0, 3.0], &[2.0, 4.0]]));
    }

    #[test]
    fn bias_only() {
        let z = Matrix::zeros(2, 3);
        let d = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]);
        let plus = reference_matmul_bias(&z, &Matrix::zeros(3, 2), &d, 2, 3, 2, false, false, false).unwrap();
        assert_eq!(plus, d);
        let minus = reference_matmul_bias(&z, &Matrix::zeros(3, 2), &d, 2, 3, 2, false, false, true).unwrap();
        assert_eq!(minus.data, vec![-1.0, 2.0, -3.0, -4.0]);
    }

    #[test]
    fn shape_mismatch() {
        let a = Matrix::zeros(3, 3);
        assert!(matches!(reference_matmul(&a, &a, 2, 3, 3, false, false), Err(KernelError::ShapeMismatch(_))));
    }

    #[test]
    fn goldens_pass() {
        let cfg = MachineConfig::default();
        for f in fixtures() {
            let cases = generate_testcases(&f.spec, 7, 5, cfg.dim);
            let v = verify_program(&f.golden_program(cfg.dim), &f.spec, &cases, cfg);
            assert!(v.passed, "{}: {:?}", f.spec.name, v.failure);
        }
    }

    #[test]
    fn fixture_set() {
        let f = fixtures();
        assert_eq!(f.iter().filter(|x| x.spec.family == Family::Matvec).count(), 4);
        assert_eq!(f.iter().filter(|x| x.spec.family == Family::Matmat).count(), 7);
    }
}
