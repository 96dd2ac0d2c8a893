//! Interactive scheduling sessions.
//!
//! A session holds the current kernel and a reduced-extent shadow copy.
//! Every accepted rewrite is replayed on the shadow and checked for
//! equivalence before it is kept.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use talift_core::llm::{Backend, GenerationParams, LlmError};
use talift_core::prompt::{Message, Prompt, Role};

use crate::command::{parse_apply, ScheduleCommand};
use crate::cost::locality_cost_with;
use crate::interp::check_equivalence;
use crate::ir::{LoopNest, Stmt};
use crate::rewrite::apply_schedule_command;
use crate::SchedError;

pub const TASK_SYSTEM: &str = include_str!("../assets/task_system.txt");
pub const TASK_USER: &str = include_str!("../assets/task_user.txt");
pub const FEEDBACK_OK: &str = include_str!("../assets/feedback_ok.txt");
pub const FEEDBACK_ERROR: &str = include_str!("../assets/feedback_error.txt");
pub const DOITGEN: &str = include_str!("../kernels/doitgen.exo");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub trials: u64,
    pub seed: u64,
    /// Largest extent of the shadow copy; `None` checks at full size.
    pub reduce_to: Option<i64>,
    pub penalty: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { trials: 5, seed: 0, reduce_to: Some(8), penalty: crate::cost::DEFAULT_PENALTY }
    }
}

/// One applied (or rejected) command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub command: Option<Value>,
    /// `ok` or the error text returned to the model.
    pub result: String,
    pub cost: f64,
}

impl SessionRecord {
    pub fn accepted(&self) -> bool {
        self.result == "ok"
    }
}

#[derive(Debug, Clone)]
struct Shadow {
    kernel: LoopNest,
    from: i64,
    to: i64,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub kernel: LoopNest,
    pub config: SessionConfig,
    pub records: Vec<SessionRecord>,
    shadow: Option<Shadow>,
}

fn largest_extent(k: &LoopNest) -> i64 {
    fn walk(stmts: &[Stmt], best: &mut i64) {
        for s in stmts {
            if let Stmt::Loop(l) = s {
                *best = (*best).max(l.hi);
                walk(&l.body, best);
            }
        }
    }
    let mut best = k.arrays.iter().flat_map(|a| a.extents.iter()).map(|&e| e as i64).max().unwrap_or(0);
    walk(&k.body, &mut best);
    best
}

impl Session {
    pub fn new(kernel: LoopNest, config: SessionConfig) -> Self {
        let largest = largest_extent(&kernel);
        let shadow = config.reduce_to.filter(|&to| largest > to).and_then(|to| {
            let reduced = kernel.with_extent(largest, to);
            reduced.validate().ok().map(|_| Shadow { kernel: reduced, from: largest, to })
        });
        Session { kernel, config, records: Vec::new(), shadow }
    }

    pub fn cost(&self) -> f64 {
        locality_cost_with(&self.kernel, self.config.penalty).total
    }

    /// Kernel used for equivalence checks.
    pub fn check_kernel(&self) -> &LoopNest {
        self.shadow.as_ref().map_or(&self.kernel, |s| &s.kernel)
    }

    fn verify(&self, cmd: &ScheduleCommand, rewritten: &LoopNest) -> Result<Option<LoopNest>, SchedError> {
        let (before, after, reduced) = match &self.shadow {
            Some(s) => {
                let after = apply_schedule_command(&s.kernel, &cmd.rescaled(s.from, s.to)).map_err(|e| {
                    SchedError::IllegalRewrite(format!("the rewrite could not be checked at reduced extents: {e}"))
                })?;
                (&s.kernel, after.clone(), Some(after))
            }
            None => (&self.kernel, rewritten.clone(), None),
        };
        let verdict = check_equivalence(before, &after, self.config.trials, self.config.seed)?;
        match verdict.mismatch {
            None => Ok(reduced),
            Some(m) => Err(SchedError::IllegalRewrite(format!(
                "the rewrite changed the result of `{}` at element {} (trial {})",
                m.array, m.index, m.trial
            ))),
        }
    }

    /// Applies `cmd` if it is legal and passes the equivalence check.
    pub fn apply(&mut self, cmd: &ScheduleCommand) -> SessionRecord {
        let outcome = apply_schedule_command(&self.kernel, cmd).and_then(|k| self.verify(cmd, &k).map(|r| (k, r)));
        let result = match outcome {
            Ok((k, reduced)) => {
                self.kernel = k;
                if let (Some(s), Some(r)) = (self.shadow.as_mut(), reduced) {
                    s.kernel = r;
                }
                "ok".to_string()
            }
            Err(e) => e.to_string(),
        };
        let record = SessionRecord { command: serde_json::to_value(cmd).ok(), result, cost: self.cost() };
        self.records.push(record.clone());
        record
    }

    /// Parses the `APPLY:` command of a model reply and applies it.
    pub fn step(&mut self, reply: &str) -> SessionRecord {
        match parse_apply(reply) {
            Ok(cmd) => self.apply(&cmd),
            Err(e) => {
                let record = SessionRecord { command: None, result: e.to_string(), cost: self.cost() };
                self.records.push(record.clone());
                record
            }
        }
    }

    pub fn opening_messages(&self) -> Vec<Message> {
        let user = TASK_USER.replace("{kernel}", self.kernel.render().trim_end()).replace("{cost}", &self.cost().to_string());
        vec![Message::new(Role::System, TASK_SYSTEM.trim_end()), Message::new(Role::User, user.trim_end())]
    }

    /// Reply to the model after `record`.
    pub fn feedback(&self, record: &SessionRecord) -> String {
        let text = if record.accepted() {
            FEEDBACK_OK.replace("{kernel}", self.kernel.render().trim_end()).replace("{cost}", &record.cost.to_string())
        } else {
            FEEDBACK_ERROR.replace("{error}", &record.result)
        };
        text.trim_end().to_string()
    }

    /// Drives up to `steps` rounds with one completion per round.
    pub fn run(&mut self, backend: &dyn Backend, params: &GenerationParams, steps: usize) -> Result<(), LlmError> {
        let params = GenerationParams { n_samples: 1, ..params.clone() };
        let mut messages = self.opening_messages();
        for _ in 0..steps {
            let reply = backend.complete(&Prompt::new(messages.clone()), &params)?.remove(0).text;
            let record = self.step(&reply);
            messages.push(Message::new(Role::Assistant, reply));
            messages.push(Message::new(Role::User, self.feedback(&record)));
        }
        Ok(())
    }
}
