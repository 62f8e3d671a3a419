use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{recognized_statements, LabelType, Stage, WorkflowPlan, WorkflowStep};

/// 1-based line/column of a character in the script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}", self.line, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DslErrorKind {
    Lexical,
    Syntax,
    UnknownStatement,
    UnknownParameter,
    MissingParameter,
    InvalidValue,
    DuplicateStatement,
    DuplicateParameter,
    EmptyPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct DslError {
    pub kind: DslErrorKind,
    pub pos: Option<Pos>,
    pub message: String,
}

impl fmt::Display for DslError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pos {
            Some(pos) => write!(f, "{pos}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl DslError {
    fn at(kind: DslErrorKind, pos: Pos, message: impl Into<String>) -> Self {
        DslError {
            kind,
            pos: Some(pos),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    LParen,
    RParen,
    Comma,
    Eq,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("identifier `{s}`"),
            Tok::Str(s) => format!("string {s:?}"),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Eq => "`=`".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, DslError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1usize, 1usize);

    while let Some(&c) = chars.peek() {
        let pos = Pos { line, col };
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars<'_>>| {
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        match c {
            '#' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump(&mut chars);
                }
            }
            c if c.is_whitespace() => {
                bump(&mut chars);
            }
            '(' | ')' | ',' | '=' => {
                bump(&mut chars);
                out.push((
                    match c {
                        '(' => Tok::LParen,
                        ')' => Tok::RParen,
                        ',' => Tok::Comma,
                        _ => Tok::Eq,
                    },
                    pos,
                ));
            }
            '\'' | '"' | '`' => {
                bump(&mut chars);
                // `...' is accepted alongside '...' and "..."
                let close = if c == '"' { '"' } else { '\'' };
                let mut value = String::new();
                loop {
                    match chars.peek().copied() {
                        Some(ch) if ch == close => {
                            bump(&mut chars);
                            break;
                        }
                        Some('\n') | None => {
                            return Err(DslError::at(
                                DslErrorKind::Lexical,
                                pos,
                                "unterminated string literal",
                            ))
                        }
                        Some(ch) => {
                            value.push(ch);
                            bump(&mut chars);
                        }
                    }
                }
                out.push((Tok::Str(value), pos));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut ident = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        ident.push(c);
                        bump(&mut chars);
                    } else {
                        break;
                    }
                }
                out.push((Tok::Ident(ident), pos));
            }
            other => {
                return Err(DslError::at(
                    DslErrorKind::Lexical,
                    pos,
                    format!("unexpected character {other:?}"),
                ))
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    idx: usize,
    end: Pos,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, Pos)> {
        self.toks.get(self.idx)
    }

    fn next(&mut self) -> Option<(Tok, Pos)> {
        let t = self.toks.get(self.idx).cloned();
        self.idx += 1;
        t
    }

    fn expect(&mut self, want: Tok) -> Result<Pos, DslError> {
        match self.next() {
            Some((tok, pos)) if tok == want => Ok(pos),
            Some((tok, pos)) => Err(DslError::at(
                DslErrorKind::Syntax,
                pos,
                format!("expected {}, found {}", want.describe(), tok.describe()),
            )),
            None => Err(DslError::at(
                DslErrorKind::Syntax,
                self.end,
                format!("expected {}, found end of script", want.describe()),
            )),
        }
    }

    fn ident(&mut self) -> Result<(String, Pos), DslError> {
        match self.next() {
            Some((Tok::Ident(s), pos)) => Ok((s, pos)),
            Some((tok, pos)) => Err(DslError::at(
                DslErrorKind::Syntax,
                pos,
                format!("expected identifier, found {}", tok.describe()),
            )),
            None => Err(DslError::at(
                DslErrorKind::Syntax,
                self.end,
                "expected identifier, found end of script",
            )),
        }
    }
}

struct RawStatement {
    name: String,
    pos: Pos,
    args: Vec<(String, String, Pos)>,
}

fn parse_statements(text: &str) -> Result<Vec<RawStatement>, DslError> {
    let toks = lex(text)?;
    let end = {
        let line = text.lines().count().max(1);
        let col = text
            .lines()
            .last()
            .map(|l| l.chars().count() + 1)
            .unwrap_or(1);
        Pos { line, col }
    };
    let mut p = Parser { toks, idx: 0, end };
    let mut out = Vec::new();
    while p.peek().is_some() {
        let (name, pos) = p.ident()?;
        p.expect(Tok::LParen)?;
        let mut args = Vec::new();
        if !matches!(p.peek(), Some((Tok::RParen, _))) {
            loop {
                let (key, kpos) = p.ident()?;
                p.expect(Tok::Eq)?;
                let value = match p.next() {
                    Some((Tok::Str(v), _)) => v,
                    Some((tok, vpos)) => {
                        return Err(DslError::at(
                            DslErrorKind::Syntax,
                            vpos,
                            format!("expected quoted string, found {}", tok.describe()),
                        ))
                    }
                    None => {
                        return Err(DslError::at(
                            DslErrorKind::Syntax,
                            p.end,
                            "expected quoted string, found end of script",
                        ))
                    }
                };
                args.push((key, value, kpos));
                if matches!(p.peek(), Some((Tok::Comma, _))) {
                    p.next();
                } else {
                    break;
                }
            }
        }
        p.expect(Tok::RParen)?;
        out.push(RawStatement { name, pos, args });
    }
    Ok(out)
}

/// Parses a controller script into an ordered plan.
///
/// Statement order is preserved; ordering rules between stages are checked
/// later by [`validate_plan`](super::validate_plan).
pub fn parse_script(text: &str) -> Result<WorkflowPlan, DslError> {
    let known = recognized_statements();
    let mut seen = HashSet::new();
    let mut steps = Vec::new();

    for stmt in parse_statements(text)? {
        let Some((_, stage, granularity)) = known.iter().find(|(n, _, _)| *n == stmt.name) else {
            return Err(DslError::at(
                DslErrorKind::UnknownStatement,
                stmt.pos,
                format!("unknown statement `{}`", stmt.name),
            ));
        };
        if !seen.insert((*stage, *granularity)) {
            return Err(DslError::at(
                DslErrorKind::DuplicateStatement,
                stmt.pos,
                format!("duplicate statement `{}`", stmt.name),
            ));
        }

        let mut step = WorkflowStep::new(*stage, *granularity);
        let mut keys = HashSet::new();
        for (key, value, kpos) in stmt.args {
            if !keys.insert(key.clone()) {
                return Err(DslError::at(
                    DslErrorKind::DuplicateParameter,
                    kpos,
                    format!("parameter `{key}` given twice"),
                ));
            }
            match (stage, key.as_str()) {
                (Stage::Train | Stage::Test | Stage::Evaluate, "label_type") => {
                    value
                        .parse::<LabelType>()
                        .map_err(|msg| DslError::at(DslErrorKind::InvalidValue, kpos, msg))?;
                    step.params.insert(key, value);
                }
                (Stage::ForkFeatures, "job") => {
                    if value.trim().is_empty() {
                        return Err(DslError::at(
                            DslErrorKind::InvalidValue,
                            kpos,
                            "fork_features job id is empty",
                        ));
                    }
                    step.fork_source = Some(value);
                }
                _ => {
                    return Err(DslError::at(
                        DslErrorKind::UnknownParameter,
                        kpos,
                        format!("`{}` does not accept parameter `{key}`", stmt.name),
                    ))
                }
            }
        }
        if *stage == Stage::ForkFeatures && step.fork_source.is_none() {
            return Err(DslError::at(
                DslErrorKind::MissingParameter,
                stmt.pos,
                "fork_features requires job = '<job id>'",
            ));
        }
        steps.push(step);
    }

    if steps.is_empty() {
        return Err(DslError {
            kind: DslErrorKind::EmptyPlan,
            pos: None,
            message: "controller script contains no statements".into(),
        });
    }
    Ok(WorkflowPlan {
        steps,
        source_text: text.to_string(),
    })
}

/// Canonical form: one statement per line, single quotes, `key = 'value'`
/// parameters separated by `, `.
pub fn render_plan(steps: &[WorkflowStep]) -> String {
    let mut out = String::new();
    for step in steps {
        let mut args: BTreeMap<&str, &str> = step
            .params
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        if let Some(job) = &step.fork_source {
            args.insert("job", job);
        }
        let rendered: Vec<String> = args.iter().map(|(k, v)| format!("{k} = '{v}'")).collect();
        out.push_str(&step.name());
        out.push('(');
        out.push_str(&rendered.join(", "));
        out.push_str(")\n");
    }
    out
}
