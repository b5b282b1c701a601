//! Line-oriented workload scripts.
//!
//! ```text
//! # comment
//! dataset B 0,1 1,3 2,5
//! join lab7 STAGING
//! channel labs peer0 peer1
//! propose peer0 peer1 A workflow_execution workflow=linreg(B)->A;store(A)->C capture=both
//! private labs peer0 peer1 S workflow_execution workflow=linreg(B)->S
//! seal
//! derive peer1 peer0 A A2 input.B=B2
//! drop peer3
//! restore peer3
//! sever peer1 peer2
//! ```

use std::fmt;

use thiserror::Error;

use crate::membership::Role;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Join {
        name: String,
        role: Role,
    },
    Propose {
        initiator: String,
        responder: String,
        asset: String,
        contract: String,
        args: Vec<(String, String)>,
    },
    Private {
        channel: String,
        initiator: String,
        responder: String,
        asset: String,
        contract: String,
        args: Vec<(String, String)>,
    },
    Derive {
        initiator: String,
        responder: String,
        parent: String,
        asset: String,
        args: Vec<(String, String)>,
    },
    Seal,
    Drop(String),
    Restore(String),
    Sever(String, String),
    Dataset {
        name: String,
        points: Vec<(f64, f64)>,
    },
    Channel {
        name: String,
        members: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Join { .. } => "join",
            Command::Propose { .. } => "propose",
            Command::Private { .. } => "private",
            Command::Derive { .. } => "derive",
            Command::Seal => "seal",
            Command::Drop(_) => "drop",
            Command::Restore(_) => "restore",
            Command::Sever(..) => "sever",
            Command::Dataset { .. } => "dataset",
            Command::Channel { .. } => "channel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptLine {
    pub line: usize,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    pub lines: Vec<ScriptLine>,
}

impl fmt::Display for ScriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.command.name())
    }
}

fn parse_args(words: &[&str], line: usize) -> Result<Vec<(String, String)>, ScriptError> {
    words
        .iter()
        .map(|w| match w.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(ScriptError {
                line,
                message: format!("expected key=value, got `{w}`"),
            }),
        })
        .collect()
}

fn parse_point(word: &str) -> Option<(f64, f64)> {
    let (x, y) = word.split_once(',')?;
    let (x, y): (f64, f64) = (x.parse().ok()?, y.parse().ok()?);
    (x.is_finite() && y.is_finite()).then_some((x, y))
}

impl Script {
    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let words: Vec<&str> = content.split_whitespace().collect();
            let err = |message: String| ScriptError { line, message };
            let arity = |min: usize, usage: &str| {
                if words.len() < min {
                    Err(err(format!("usage: {usage}")))
                } else {
                    Ok(())
                }
            };
            let exact = |n: usize, usage: &str| {
                if words.len() != n {
                    Err(err(format!("usage: {usage}")))
                } else {
                    Ok(())
                }
            };
            let s = |i: usize| words[i].to_string();
            let command = match words[0] {
                "join" => {
                    exact(3, "join <name> <role>")?;
                    let role = words[2].parse().map_err(err)?;
                    Command::Join { name: s(1), role }
                }
                "propose" => {
                    arity(5, "propose <initiator> <responder> <asset> <contract> [key=value...]")?;
                    Command::Propose {
                        initiator: s(1),
                        responder: s(2),
                        asset: s(3),
                        contract: s(4),
                        args: parse_args(&words[5..], line)?,
                    }
                }
                "private" => {
                    arity(6, "private <channel> <initiator> <responder> <asset> <contract> [key=value...]")?;
                    Command::Private {
                        channel: s(1),
                        initiator: s(2),
                        responder: s(3),
                        asset: s(4),
                        contract: s(5),
                        args: parse_args(&words[6..], line)?,
                    }
                }
                "derive" => {
                    arity(5, "derive <initiator> <responder> <parent> <asset> [key=value...]")?;
                    Command::Derive {
                        initiator: s(1),
                        responder: s(2),
                        parent: s(3),
                        asset: s(4),
                        args: parse_args(&words[5..], line)?,
                    }
                }
                "seal" => {
                    exact(1, "seal")?;
                    Command::Seal
                }
                "drop" => {
                    exact(2, "drop <peer>")?;
                    Command::Drop(s(1))
                }
                "restore" => {
                    exact(2, "restore <peer>")?;
                    Command::Restore(s(1))
                }
                "sever" => {
                    exact(3, "sever <a> <b>")?;
                    Command::Sever(s(1), s(2))
                }
                "dataset" => {
                    arity(2, "dataset <name> x,y ...")?;
                    let points = words[2..]
                        .iter()
                        .map(|w| parse_point(w).ok_or_else(|| err(format!("bad point `{w}`"))))
                        .collect::<Result<_, _>>()?;
                    Command::Dataset { name: s(1), points }
                }
                "channel" => {
                    arity(3, "channel <name> <member> <member>...")?;
                    Command::Channel {
                        name: s(1),
                        members: words[2..].iter().map(|w| w.to_string()).collect(),
                    }
                }
                other => return Err(err(format!("unknown command `{other}`"))),
            };
            lines.push(ScriptLine { line, command });
        }
        Ok(Script { lines })
    }
}
