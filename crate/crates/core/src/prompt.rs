//! Prompt assembly for translation, block optimization, block reordering and
//! the two-step repair conversation.
//!
//! All text comes from the assets under `assets/prompts`; builders only
//! select, order and fill them, so equal inputs always give byte-identical
//! prompts.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernels::{fixtures, KernelSpec};

pub const ISA_TEXT: &str = include_str!("../assets/prompts/isa.txt");
const TRANSLATE: &str = include_str!("../assets/prompts/instructions/translate.txt");
const OPTIMIZE: &str = include_str!("../assets/prompts/instructions/optimize.txt");
const REORDER: &str = include_str!("../assets/prompts/instructions/reorder.txt");
const REPAIR_MARK: &str = include_str!("../assets/prompts/instructions/repair_mark.txt");
const REPAIR_FILL: &str = include_str!("../assets/prompts/instructions/repair_fill.txt");
const SOURCE_NL: &str = include_str!("../assets/prompts/source_nl.txt");
const SOURCE_CODE: &str = include_str!("../assets/prompts/source_code.txt");

const ISA_MARKER: &str = "<insert ISA prompt here>";
const BLOCK_MARKER: &str = "<insert unoptimized block here>";
const CODE_MARKER: &str = "<insert unoptimized code here>";
const HEURISTICS_HEADER: &str = "// heuristics:";

/// In-context examples shipped with the crate: `(id, annotated, stripped)`.
pub const EXAMPLES: &[(&str, &str, &str)] = &[
    (
        "matvec",
        include_str!("../assets/prompts/examples/matvec_annotated.txt"),
        include_str!("../assets/prompts/examples/matvec_stripped.txt"),
    ),
    (
        "matmat",
        include_str!("../assets/prompts/examples/matmat_annotated.txt"),
        include_str!("../assets/prompts/examples/matmat_stripped.txt"),
    ),
    (
        "matmat_tb",
        include_str!("../assets/prompts/examples/matmat_tb_annotated.txt"),
        include_str!("../assets/prompts/examples/matmat_tb_stripped.txt"),
    ),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no in-context example named `{0}`")]
    MissingExample(String),
    #[error("{0} shots requested but only {1} default examples exist")]
    TooManyShots(usize, usize),
    #[error("the constant set is empty")]
    EmptyConstantSet,
    #[error("the candidate program is empty")]
    EmptyCandidate,
    #[error("at least one block is required")]
    NoBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Message { role, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub messages: Vec<Message>,
    pub fingerprint: String,
}

impl Prompt {
    pub fn new(messages: Vec<Message>) -> Self {
        let canonical = serde_json::to_string(&messages).expect("messages serialize");
        let fingerprint = hex::encode(Sha256::digest(canonical.as_bytes()));
        Prompt { messages, fingerprint }
    }

    /// All message texts joined by blank lines.
    pub fn text(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n\n")
    }

    pub fn byte_len(&self) -> usize {
        self.messages.iter().map(|m| m.text.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceStyle {
    #[default]
    NlOnly,
    CodeOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExamplesPosition {
    BeforeInstructions,
    #[default]
    AfterInstructions,
}

/// How sections are split between chat roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoleSplit {
    /// Instructions, ISA and examples as the system message; source and
    /// target as the user message.
    #[default]
    SystemUser,
    /// Everything in a single user message.
    UserOnly,
}

/// Translation prompt options. The remaining prompt families have dedicated
/// builders taking their attachments directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub shots: usize,
    pub nl_annotated: bool,
    pub include_isa: bool,
    pub source_style: SourceStyle,
    pub examples_position: ExamplesPosition,
    /// Explicit example ids; when empty the defaults for `shots` are used.
    #[serde(default)]
    pub examples: Vec<String>,
    #[serde(default)]
    pub role_split: RoleSplit,
    pub kernel: KernelSpec,
}

impl PromptSpec {
    pub fn new(kernel: KernelSpec) -> Self {
        PromptSpec {
            shots: 1,
            nl_annotated: true,
            include_isa: true,
            source_style: SourceStyle::NlOnly,
            examples_position: ExamplesPosition::AfterInstructions,
            examples: Vec::new(),
            role_split: RoleSplit::SystemUser,
            kernel,
        }
    }

    /// Ids of the in-context examples this prompt embeds, in order.
    pub fn example_ids(&self) -> Result<Vec<String>, PromptError> {
        let ids: Vec<String> = if self.examples.is_empty() {
            const DEFAULTS: [&str; 2] = ["matvec", "matmat_tb"];
            if self.shots > DEFAULTS.len() {
                return Err(PromptError::TooManyShots(self.shots, DEFAULTS.len()));
            }
            DEFAULTS[..self.shots].iter().map(|s| s.to_string()).collect()
        } else {
            self.examples.clone()
        };
        for id in &ids {
            if !EXAMPLES.iter().any(|(name, _, _)| name == id) {
                return Err(PromptError::MissingExample(id.clone()));
            }
        }
        Ok(ids)
    }

    /// Kernels whose solution appears in the prompt as an example.
    pub fn example_kernels(&self) -> Result<Vec<String>, PromptError> {
        let ids = self.example_ids()?;
        Ok(fixtures()
            .iter()
            .filter(|f| f.spec.in_context_example.as_ref().is_some_and(|e| ids.contains(e)))
            .map(|f| f.spec.name.clone())
            .collect())
    }
}

/// Removes `//` commentary inside the fenced code of an example: comment-only
/// lines are dropped and trailing comments are cut. Text outside the fence
/// is kept unchanged.
pub fn strip_annotations(example: &str) -> String {
    let mut out = Vec::new();
    let mut in_fence = false;
    for line in example.split('\n') {
        if line.trim_start().starts_with("```") {
            in_fence = !in_fence;
            out.push(line.to_string());
            continue;
        }
        if in_fence {
            if line.trim_start().starts_with("//") {
                continue;
            }
            if let Some(pos) = line.find("//") {
                out.push(line[..pos].trim_end().to_string());
                continue;
            }
        }
        out.push(line.to_string());
    }
    out.join("\n")
}

/// Returns the annotated or stripped text of an example.
pub fn example_text(id: &str, annotated: bool) -> Result<&'static str, PromptError> {
    EXAMPLES
        .iter()
        .find(|(name, _, _)| *name == id)
        .map(|(_, a, s)| if annotated { *a } else { *s })
        .ok_or_else(|| PromptError::MissingExample(id.to_string()))
}

fn translate_parts() -> (&'static str, &'static str) {
    let (intro, rest) = TRANSLATE.split_once(ISA_MARKER).expect("translate template has an ISA marker");
    let task = rest.trim();
    // the template's last line names the examples; it is regenerated per shot count
    let task = task.rsplit_once('\n').map_or(task, |(head, _)| head);
    (intro.trim(), task)
}

fn closing_line(shots: usize) -> String {
    let target = shots + 1;
    match shots {
        0 => format!("Write the low level code for Example {target}."),
        1 => format!(
            "Example 1 is a simple example which should only be used for style inspiration. Write the low level code \
             for Example {target}."
        ),
        n => {
            let names: Vec<String> = (1..=n).map(|i| i.to_string()).collect();
            let list = format!("{} and {}", names[..n - 1].join(", "), names[n - 1]);
            format!(
                "Examples {list} are simple examples which should only be used for style inspiration. Write the low \
                 level code for Example {target}."
            )
        }
    }
}

/// The `Example N:` block describing the kernel to translate.
pub fn target_section(kernel: &KernelSpec, number: usize) -> String {
    format!("Example {number}:\n#test function\n// {}\n{}", kernel.describe(), kernel.test_function().trim_end())
}

pub fn build_translation_prompt(spec: &PromptSpec) -> Result<Prompt, PromptError> {
    let ids = spec.example_ids()?;
    let (intro, task) = translate_parts();
    let isa = spec.include_isa.then(|| format!("{intro}\n\n{}", ISA_TEXT.trim_end()));
    let instructions = format!("{task}\n{}", closing_line(ids.len()));
    let mut examples = Vec::new();
    for (n, id) in ids.iter().enumerate() {
        examples.push(format!("Example {}:\n{}", n + 1, example_text(id, spec.nl_annotated)?.trim_end()));
    }
    let source = match spec.source_style {
        SourceStyle::NlOnly => SOURCE_NL.trim_end().to_string(),
        SourceStyle::CodeOnly => SOURCE_CODE.trim_end().to_string(),
        SourceStyle::Both => format!("{}\n\n{}", SOURCE_CODE.trim_end(), SOURCE_NL.trim_end()),
    };
    let target = target_section(&spec.kernel, ids.len() + 1);

    let mut head: Vec<String> = Vec::new();
    match spec.examples_position {
        ExamplesPosition::BeforeInstructions => {
            head.extend(examples);
            head.extend(isa);
            head.push(instructions);
        }
        ExamplesPosition::AfterInstructions => {
            head.extend(isa);
            head.push(instructions);
            head.extend(examples);
        }
    }
    let tail = [source, target];
    let messages = match spec.role_split {
        RoleSplit::SystemUser => {
            vec![Message::new(Role::System, head.join("\n\n")), Message::new(Role::User, tail.join("\n\n"))]
        }
        RoleSplit::UserOnly => {
            let all: Vec<String> = head.into_iter().chain(tail).collect();
            vec![Message::new(Role::User, all.join("\n\n"))]
        }
    };
    Ok(Prompt::new(messages))
}

/// The four heuristics of the optimization template, without numbering.
pub fn default_heuristics() -> Vec<String> {
    OPTIMIZE
        .lines()
        .skip_while(|l| l.trim() != HEURISTICS_HEADER)
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .filter_map(|l| l.split_once(". ").map(|(_, rest)| rest.to_string()))
        .collect()
}

fn optimize_preamble(template: &str) -> &str {
    template.lines().next().unwrap_or_default()
}

pub fn build_block_optimize_prompt(block_text: &str, isa_text: &str, heuristics: &[String]) -> Prompt {
    let mut system = optimize_preamble(OPTIMIZE).to_string();
    if !heuristics.is_empty() {
        system.push('\n');
        system.push_str(HEURISTICS_HEADER);
        for (n, h) in heuristics.iter().enumerate() {
            system.push_str(&format!("\n{}. {h}", n + 1));
        }
    }
    debug_assert!(OPTIMIZE.contains(ISA_MARKER) && OPTIMIZE.contains(BLOCK_MARKER));
    system.push_str("\n\n");
    system.push_str(isa_text.trim_end());
    Prompt::new(vec![Message::new(Role::System, system), Message::new(Role::User, block_text.trim_end())])
}

/// Label used for block `index` in reorder prompts and plans.
pub fn block_label(index: usize) -> String {
    format!("Block {index}")
}

pub fn build_reorder_prompt(blocks: &[String], isa_text: &str) -> Result<Prompt, PromptError> {
    if blocks.is_empty() {
        return Err(PromptError::NoBlocks);
    }
    let (head, _) = REORDER.split_once(ISA_MARKER).expect("reorder template has an ISA marker");
    debug_assert!(REORDER.contains(CODE_MARKER));
    let system = format!("{}\n\n{}", head.trim_end(), isa_text.trim_end());
    let body: Vec<String> =
        blocks.iter().enumerate().map(|(i, b)| format!("{}:\n{}", block_label(i), b.trim_end())).collect();
    Ok(Prompt::new(vec![Message::new(Role::System, system), Message::new(Role::User, body.join("\n\n"))]))
}

/// Renders a constant set in brace notation, e.g. `{0, 1, 3, 4, 12}`.
pub fn brace_set(constants: &[i64]) -> String {
    let items: Vec<String> = constants.iter().map(|c| c.to_string()).collect();
    format!("{{{}}}", items.join(", "))
}

/// Prompt 1 asks for holes to be marked; prompt 2 asks for them to be filled
/// from `constants`. Prompt 2 is sent as a continuation of the conversation
/// started by prompt 1 (see [`repair_fill_conversation`]).
pub fn build_repair_prompts(candidate_code: &str, constants: &[i64]) -> Result<(Prompt, Prompt), PromptError> {
    if candidate_code.trim().is_empty() {
        return Err(PromptError::EmptyCandidate);
    }
    if constants.is_empty() {
        return Err(PromptError::EmptyConstantSet);
    }
    let mark = Prompt::new(vec![Message::new(
        Role::User,
        format!("```\n{}\n```\n\n{}", candidate_code.trim_end(), REPAIR_MARK.trim_end()),
    )]);
    let fill_text = REPAIR_FILL.trim_end().replace("{constants}", &brace_set(constants));
    let fill = Prompt::new(vec![Message::new(Role::User, fill_text)]);
    Ok((mark, fill))
}

/// Full conversation for the fill step: prompt 1, the model's marked reply,
/// then prompt 2.
pub fn repair_fill_conversation(mark: &Prompt, marked_reply: &str, fill: &Prompt) -> Prompt {
    let mut messages = mark.messages.clone();
    messages.push(Message::new(Role::Assistant, marked_reply));
    messages.extend(fill.messages.iter().cloned());
    Prompt::new(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::fixture;

    fn spec(name: &str) -> PromptSpec {
        PromptSpec::new(fixture(name).unwrap().spec.clone())
    }

    #[test]
    fn zero_shot_has_isa_and_no_example() {
        let mut s = spec("gv2");
        s.shots = 0;
        let p = build_translation_prompt(&s).unwrap();
        assert!(p.text().contains("config_ex"));
        assert!(!p.text().contains("// rewritten program"));
        assert!(p.text().contains("Write the low level code for Example 1."));
    }

    #[test]
    fn one_shot_embeds_example_verbatim() {
        let p = build_translation_prompt(&spec("gv2")).unwrap();
        let text = p.text();
        assert!(text.contains(EXAMPLES[0].1.trim_end()));
        assert!(text.contains("tiled_matmul_outer_eigen(AmBKt, p, AmBKt_p, 12, 12, 1, false, false);"));
        assert!(text.contains("Write the low level code for Example 2."));
    }

    #[test]
    fn repair_prompts() {
        let (p1, p2) = build_repair_prompts("fence();", &[0, 1, 3, 4, 12]).unwrap();
        assert!(p1.text().contains("<CONST>"));
        assert!(p2.text().contains("{0, 1, 3, 4, 12}"));
        let (_, p2) = build_repair_prompts("fence();", &[7]).unwrap();
        assert!(p2.text().contains("{7}"));
        assert_eq!(build_repair_prompts("fence();", &[]), Err(PromptError::EmptyConstantSet));
    }

    #[test]
    fn heuristics() {
        let h = default_heuristics();
        assert_eq!(h.len(), 4);
        assert_eq!(h[0], "moving data ahead of time helps");
        assert_eq!(h[3], "number of mvin rows <= 4");
        let p = build_block_optimize_prompt("fence();", ISA_TEXT, &h);
        for (i, line) in h.iter().enumerate() {
            assert!(p.text().contains(&format!("{}. {line}", i + 1)));
        }
        let bare = build_block_optimize_prompt("fence();", ISA_TEXT, &[]);
        assert!(!bare.text().contains(HEURISTICS_HEADER));
    }

    #[test]
    fn unknown_example() {
        let mut s = spec("gv2");
        s.examples = vec!["nope".into()];
        assert_eq!(build_translation_prompt(&s), Err(PromptError::MissingExample("nope".into())));
    }
}
