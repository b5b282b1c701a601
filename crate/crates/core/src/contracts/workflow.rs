//! Workflow descriptions: ordered steps over named datasets.
//!
//! Each op has fixed input and output roles:
//!
//! | op       | inputs   | outputs  | params   |
//! |----------|----------|----------|----------|
//! | `linreg` | `points` | `model`  |          |
//! | `scale`  | `points` | `points` | `factor` |
//! | `store`  | `data`   | `file`   |          |
//!
//! The compact notation used by workload scripts writes one step as
//! `op[key=value,...](input)->output` and separates steps with `;`, for
//! example `linreg(B)->A;store(A)->C`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::canonical::{Canonical, CanonicalError, Fields, Value};

/// Workflows are kept shallow.
pub const MAX_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkflowError {
    #[error("workflow has no steps")]
    Empty,
    #[error("workflow has {0} steps; at most {MAX_STEPS} are allowed")]
    TooManySteps(usize),
    #[error("step {step}: {reason}")]
    BadStep { step: usize, reason: String },
    #[error("cannot parse workflow: {0}")]
    Syntax(String),
    #[error(transparent)]
    Canonical(#[from] CanonicalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Op {
    Linreg,
    Scale,
    Store,
}

impl Op {
    pub fn as_str(&self) -> &'static str {
        match self {
            Op::Linreg => "linreg",
            Op::Scale => "scale",
            Op::Store => "store",
        }
    }

    pub fn input_role(&self) -> &'static str {
        match self {
            Op::Linreg | Op::Scale => "points",
            Op::Store => "data",
        }
    }

    pub fn output_role(&self) -> &'static str {
        match self {
            Op::Linreg => "model",
            Op::Scale => "points",
            Op::Store => "file",
        }
    }

    fn params(&self) -> &'static [&'static str] {
        match self {
            Op::Scale => &["factor"],
            Op::Linreg | Op::Store => &[],
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linreg" => Ok(Op::Linreg),
            "scale" => Ok(Op::Scale),
            "store" => Ok(Op::Store),
            _ => Err(format!("unknown op `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub op: Op,
    /// role -> dataset name
    pub inputs: BTreeMap<String, String>,
    /// role -> dataset or file name
    pub outputs: BTreeMap<String, String>,
    pub params: BTreeMap<String, String>,
}

impl Step {
    pub fn new(op: Op, input: &str, output: &str) -> Self {
        Step {
            op,
            inputs: BTreeMap::from([(op.input_role().to_string(), input.to_string())]),
            outputs: BTreeMap::from([(op.output_role().to_string(), output.to_string())]),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: &str) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input(&self) -> &str {
        &self.inputs[self.op.input_role()]
    }

    pub fn output(&self) -> &str {
        &self.outputs[self.op.output_role()]
    }

    fn to_value(&self) -> Value {
        Value::object()
            .field("inputs", Value::string_map(&self.inputs))
            .str("op", self.op.as_str())
            .field("outputs", Value::string_map(&self.outputs))
            .field("params", Value::string_map(&self.params))
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "step")?;
        let inputs = f.string_map("inputs")?;
        let op = f.str("op")?;
        let op = Op::from_str(&op).map_err(|e| f.invalid("op", e))?;
        let outputs = f.string_map("outputs")?;
        let params = f.string_map("params")?;
        f.finish()?;
        Ok(Step {
            op,
            inputs,
            outputs,
            params,
        })
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.op.as_str())?;
        if !self.params.is_empty() {
            let params: Vec<_> = self.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            write!(f, "[{}]", params.join(","))?;
        }
        let input = self.inputs.values().next().map(String::as_str).unwrap_or("");
        let output = self.outputs.values().next().map(String::as_str).unwrap_or("");
        write!(f, "({input})->{output}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WorkflowDescription {
    pub steps: Vec<Step>,
}

impl WorkflowDescription {
    pub fn new(steps: Vec<Step>) -> Self {
        WorkflowDescription { steps }
    }

    /// Check roles, params and dataflow order.
    pub fn validate(&self) -> Result<(), WorkflowError> {
        if self.steps.is_empty() {
            return Err(WorkflowError::Empty);
        }
        if self.steps.len() > MAX_STEPS {
            return Err(WorkflowError::TooManySteps(self.steps.len()));
        }
        let produced_anywhere: BTreeSet<&str> = self
            .steps
            .iter()
            .flat_map(|s| s.outputs.values().map(String::as_str))
            .collect();
        let mut available: BTreeSet<&str> = BTreeSet::new();
        let mut produced: BTreeSet<&str> = BTreeSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            let bad = |reason: String| WorkflowError::BadStep { step: i, reason };
            let in_roles: Vec<_> = step.inputs.keys().map(String::as_str).collect();
            if in_roles != [step.op.input_role()] {
                return Err(bad(format!("{} takes exactly one `{}` input", step.op, step.op.input_role())));
            }
            let out_roles: Vec<_> = step.outputs.keys().map(String::as_str).collect();
            if out_roles != [step.op.output_role()] {
                return Err(bad(format!("{} produces exactly one `{}` output", step.op, step.op.output_role())));
            }
            let param_keys: Vec<_> = step.params.keys().map(String::as_str).collect();
            if param_keys != step.op.params() {
                return Err(bad(format!("{} expects params {:?}", step.op, step.op.params())));
            }
            if let Some(factor) = step.params.get("factor") {
                match factor.parse::<f64>() {
                    Ok(v) if v.is_finite() => {}
                    _ => return Err(bad(format!("factor `{factor}` is not a finite number"))),
                }
            }
            for name in step.inputs.values().chain(step.outputs.values()) {
                if name.is_empty() || name.starts_with('.') || name.contains(['/', '\\']) || name.chars().any(char::is_whitespace) {
                    return Err(bad(format!("invalid dataset name `{name}`")));
                }
            }
            let input = step.input();
            if !available.contains(input) && produced_anywhere.contains(input) {
                return Err(bad(format!("input `{input}` is produced by a later step")));
            }
            available.insert(input);
            let output = step.output();
            if available.contains(output) || !produced.insert(output) {
                return Err(bad(format!("output `{output}` would overwrite an existing dataset")));
            }
            available.insert(output);
        }
        Ok(())
    }

    /// Datasets read by the workflow but produced by none of its steps.
    pub fn external_inputs(&self) -> Vec<String> {
        let produced: BTreeSet<&str> = self.steps.iter().map(|s| s.output()).collect();
        let mut out: Vec<String> = Vec::new();
        for step in &self.steps {
            let input = step.input();
            if !produced.contains(input) && !out.iter().any(|o| o == input) {
                out.push(input.to_string());
            }
        }
        out
    }

    /// Parse the compact `op[params](in)->out;...` notation.
    pub fn parse_compact(text: &str) -> Result<WorkflowDescription, WorkflowError> {
        let mut steps = Vec::new();
        for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            steps.push(parse_compact_step(part)?);
        }
        let wf = WorkflowDescription { steps };
        wf.validate()?;
        Ok(wf)
    }

    /// Parse either the canonical form or the compact notation.
    pub fn parse_any(text: &str) -> Result<WorkflowDescription, WorkflowError> {
        if text.starts_with('{') {
            let wf = WorkflowDescription::from_canonical_str(text)?;
            wf.validate()?;
            Ok(wf)
        } else {
            WorkflowDescription::parse_compact(text)
        }
    }

    pub fn to_compact(&self) -> String {
        self.steps
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn parse_compact_step(part: &str) -> Result<Step, WorkflowError> {
    let syntax = || WorkflowError::Syntax(part.to_string());
    let (head, output) = part.split_once("->").ok_or_else(syntax)?;
    let head = head.trim();
    let (call, input) = head.strip_suffix(')').and_then(|h| h.split_once('(')).ok_or_else(syntax)?;
    let (op, params) = match call.split_once('[') {
        Some((op, rest)) => (op, rest.strip_suffix(']').ok_or_else(syntax)?),
        None => (call, ""),
    };
    let op = Op::from_str(op.trim()).map_err(WorkflowError::Syntax)?;
    let mut step = Step::new(op, input.trim(), output.trim());
    for kv in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(syntax)?;
        step.params.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(step)
}

impl Canonical for WorkflowDescription {
    fn to_value(&self) -> Value {
        Value::object()
            .field("steps", Value::List(self.steps.iter().map(Step::to_value).collect()))
            .build()
    }

    fn from_value(value: Value) -> Result<Self, CanonicalError> {
        let mut f = Fields::new(value, "workflow")?;
        let steps = f
            .list("steps")?
            .into_iter()
            .map(Step::from_value)
            .collect::<Result<_, _>>()?;
        f.finish()?;
        Ok(WorkflowDescription { steps })
    }
}
