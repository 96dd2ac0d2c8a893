//! Translation experiments: prompt, sample, extract, verify, and pass@k
//! reporting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::check_syntax;
use crate::kernels::{fixture, generate_testcases, verify_text, Verdict};
use crate::llm::{Backend, GenerationParams, LlmError};
use crate::prompt::{build_translation_prompt, ExamplesPosition, PromptError, PromptSpec, RoleSplit, SourceStyle};
use crate::sim::MachineConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pass@k undefined for n={n}, c={c}, k={k}")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] LlmError),
    #[error("writing records: {0}")]
    Io(#[from] std::io::Error),
}

/// Returns the longest fenced code block of a reply. Without fences the whole
/// text is returned if it is syntactically a program.
pub fn extract_code(text: &str) -> Option<String> {
    let mut best: Option<String> = None;
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(lines) => {
                    let block = lines.join("\n");
                    if best.as_ref().is_none_or(|b| block.len() > b.len()) {
                        best = Some(block);
                    }
                }
                None => current = Some(Vec::new()),
            }
        } else if let Some(lines) = current.as_mut() {
            lines.push(line);
        }
    }
    if best.is_some() {
        return best;
    }
    let trimmed = text.trim();
    (!trimmed.is_empty() && check_syntax(trimmed).is_ok()).then(|| trimmed.to_string())
}

/// Unbiased pass@k estimate `1 − Π_{i<k} (n−c−i)/(n−i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::Domain { n, c, k });
    }
    if c > n - k {
        return Ok(1.0);
    }
    let mut miss = 1.0f64;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

/// One prompt configuration of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub label: String,
    #[serde(default = "one")]
    pub shots: usize,
    #[serde(default = "yes")]
    pub nl_annotated: bool,
    #[serde(default = "yes")]
    pub include_isa: bool,
    #[serde(default)]
    pub source_style: SourceStyle,
    #[serde(default)]
    pub examples_position: ExamplesPosition,
    #[serde(default)]
    pub examples: Vec<String>,
    #[serde(default)]
    pub role_split: RoleSplit,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Ablation {
    pub fn new(label: impl Into<String>) -> Self {
        Ablation {
            label: label.into(),
            shots: 1,
            nl_annotated: true,
            include_isa: true,
            source_style: SourceStyle::default(),
            examples_position: ExamplesPosition::default(),
            examples: Vec::new(),
            role_split: RoleSplit::default(),
        }
    }

    pub fn prompt_spec(&self, kernel: &crate::kernels::KernelSpec) -> PromptSpec {
        PromptSpec {
            shots: self.shots,
            nl_annotated: self.nl_annotated,
            include_isa: self.include_isa,
            source_style: self.source_style,
            examples_position: self.examples_position,
            examples: self.examples.clone(),
            role_split: self.role_split,
            kernel: kernel.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool samples across kernels, then estimate.
    #[default]
    Micro,
    /// Average the per-kernel estimates.
    Macro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kernels: Vec<String>,
    pub ablations: Vec<Ablation>,
    pub n: u32,
    pub k: Vec<u32>,
    pub seed: u64,
    pub testcases_per_kernel: usize,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub machine: MachineConfig,
    /// Free-form date stamp copied into the report; left out when absent so
    /// reports stay reproducible.
    #[serde(default)]
    pub date: Option<String>,
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.kernels.is_empty() {
            return bad("no kernels".into());
        }
        if self.ablations.is_empty() {
            return bad("no ablations".into());
        }
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.testcases_per_kernel == 0 {
            return bad("testcases_per_kernel must be at least 1".into());
        }
        if let Some(k) = self.k.iter().find(|&&k| k == 0 || k > self.n) {
            return bad(format!("k={k} is outside 1..={}", self.n));
        }
        for name in &self.kernels {
            fixture(name).map_err(|e| EvalError::Config(e.to_string()))?;
        }
        let mut labels: Vec<&str> = self.ablations.iter().map(|a| a.label.as_str()).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("ablation labels must be unique".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub config: String,
    pub kernel: String,
    pub fingerprint: String,
    pub sample_index: u32,
    pub raw_text: String,
    pub code: Option<String>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelCount {
    pub kernel: String,
    pub n: u64,
    pub c: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub counts: Vec<KernelCount>,
    /// Kernels left out because the prompt embeds their solution.
    pub excluded: Vec<String>,
    /// `(k, estimate)`; `None` when `k` exceeds the samples available.
    pub pass_at_k: Vec<(u32, Option<f64>)>,
}

impl ReportRow {
    pub fn totals(&self) -> (u64, u64) {
        self.counts.iter().fold((0, 0), |(n, c), kc| (n + kc.n, c + kc.c))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub params: GenerationParams,
    pub aggregation: Aggregation,
    pub date: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub k: Vec<u32>,
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

/// Estimates pass@k for a row's counts.
pub fn aggregate(counts: &[KernelCount], k: u32, aggregation: Aggregation) -> Option<f64> {
    let k = u64::from(k);
    match aggregation {
        Aggregation::Micro => {
            let (n, c) = counts.iter().fold((0, 0), |(n, c), kc| (n + kc.n, c + kc.c));
            pass_at_k(n, c, k).ok()
        }
        Aggregation::Macro => {
            if counts.is_empty() {
                return None;
            }
            let mut sum = 0.0;
            for kc in counts {
                sum += pass_at_k(kc.n, kc.c, k).ok()?;
            }
            Some(sum / counts.len() as f64)
        }
    }
}

/// Runs every (ablation, kernel) pair through `backend`. Kernels whose
/// solution is embedded in an ablation's prompt are excluded from that row.
pub fn run_experiment(
    config: &ExperimentConfig,
    backend: &dyn Backend,
) -> Result<(ExperimentReport, Vec<CandidateRecord>), EvalError> {
    config.check()?;
    let mut params = config.params.clone();
    params.n_samples = config.n;
    let cfg = config.machine;

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for ablation in &config.ablations {
        let mut counts = Vec::new();
        let mut excluded = Vec::new();
        for name in &config.kernels {
            let spec = &fixture(name).map_err(|e| EvalError::Config(e.to_string()))?.spec;
            let prompt_spec = ablation.prompt_spec(spec);
            if prompt_spec.example_kernels()?.contains(name) {
                excluded.push(name.clone());
                continue;
            }
            let prompt = build_translation_prompt(&prompt_spec)?;
            let completions = backend.complete(&prompt, &params)?;
            let cases = generate_testcases(spec, config.seed, config.testcases_per_kernel, cfg.dim);
            let mut kernel_records: Vec<CandidateRecord> = completions
                .par_iter()
                .enumerate()
                .map(|(i, completion)| {
                    let code = extract_code(&completion.text);
                    let verdict = match &code {
                        Some(code) => verify_text(code, spec, &cases, cfg, true),
                        None => Verdict::parse_error("no code found in completion"),
                    };
                    CandidateRecord {
                        config: ablation.label.clone(),
                        kernel: name.clone(),
                        fingerprint: prompt.fingerprint.clone(),
                        sample_index: i as u32,
                        raw_text: completion.text.clone(),
                        code,
                        verdict,
                    }
                })
                .collect();
            let c = kernel_records.iter().filter(|r| r.verdict.passed).count() as u64;
            counts.push(KernelCount { kernel: name.clone(), n: kernel_records.len() as u64, c });
            records.append(&mut kernel_records);
        }
        let pass_at_k = config.k.iter().map(|&k| (k, aggregate(&counts, k, config.aggregation))).collect();
        rows.push(ReportRow { label: ablation.label.clone(), counts, excluded, pass_at_k });
    }
    let report = ExperimentReport {
        k: config.k.clone(),
        rows,
        metadata: ReportMetadata {
            seed: config.seed,
            params,
            aggregation: config.aggregation,
            date: config.date.clone(),
        },
    };
    Ok((report, records))
}

/// Writes one JSON document per record under `dir/<config>/<kernel>/<index>.json`.
pub fn write_records(dir: &Path, records: &[CandidateRecord]) -> Result<(), EvalError> {
    for r in records {
        let sub = dir.join(sanitize(&r.config)).join(&r.kernel);
        fs::create_dir_all(&sub)?;
        let body = serde_json::to_string_pretty(r).expect("records serialize");
        fs::write(sub.join(format!("{:03}.json", r.sample_index)), body + "\n")?;
    }
    Ok(())
}

fn sanitize(label: &str) -> String {
    label.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Csv,
}

pub fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", v * 100.0))
}

pub fn render_report(r: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(r),
        ReportFormat::Csv => render_csv(r),
    }
}

fn render_table(r: &ExperimentReport) -> String {
    let mut header = vec!["config".to_string()];
    header.extend(r.k.iter().map(|k| format!("k={k}")));
    let mut lines: Vec<Vec<String>> = vec![header];
    for row in &r.rows {
        let mut cells = vec![row.label.clone()];
        cells.extend(row.pass_at_k.iter().map(|(_, v)| percent(*v)));
        lines.push(cells);
    }
    let cols = lines[0].len();
    let widths: Vec<usize> = (0..cols).map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (li, line) in lines.iter().enumerate() {
        let mut text = format!("{:<w$}", line[0], w = widths[0]);
        for (cell, w) in line.iter().zip(&widths).skip(1) {
            let _ = write!(text, "  {cell:>w$}");
        }
        out.push_str(text.trim_end());
        out.push('\n');
        if li == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    let notes: Vec<String> = r
        .rows
        .iter()
        .filter(|row| !row.excluded.is_empty())
        .map(|row| format!("{}: excluded {} (in-context example)", row.label, row.excluded.join(", ")))
        .collect();
    if !notes.is_empty() {
        out.push('\n');
        for n in notes {
            out.push_str(&n);
            out.push('\n');
        }
    }
    out
}

fn render_csv(r: &ExperimentReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config".to_string(), "n".to_string(), "c".to_string()];
    header.extend(r.k.iter().map(|k| format!("pass@{k}")));
    header.push("excluded".to_string());
    w.write_record(&header).expect("in-memory csv write");
    for row in &r.rows {
        let (n, c) = row.totals();
        let mut rec = vec![row.label.clone(), n.to_string(), c.to_string()];
        rec.extend(row.pass_at_k.iter().map(|(_, v)| percent(*v)));
        rec.push(row.excluded.join(" "));
        w.write_record(&rec).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush in-memory csv")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extract_examples() {
        assert_eq!(extract_code("```\nfence();\n```").as_deref(), Some("fence();"));
        assert_eq!(extract_code("I cannot do that."), None);
        assert_eq!(extract_code("```c\nfence();\n```\ntext\n```\nfence();\nfence();\n```").as_deref(), Some("fence();\nfence();"));
        assert_eq!(extract_code("fence();").as_deref(), Some("fence();"));
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(pass_at_k(1, 1, 1).unwrap(), 1.0);
        assert_eq!(pass_at_k(50, 0, 50).unwrap(), 0.0);
        assert!((pass_at_k(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(pass_at_k(2, 1, 1).unwrap(), 0.5);
        assert!(pass_at_k(2, 3, 1).is_err());
        assert!(pass_at_k(2, 1, 3).is_err());
        assert!(pass_at_k(2, 1, 0).is_err());
    }
}
