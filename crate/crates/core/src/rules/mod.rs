//! If-then production rules evaluated per session as 2×2 contingency
//! tables, with per-session significance tests and cross-session
//! aggregation.

mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bundle::{BundleError, SessionActivity};
use crate::catalog::{LabelTable, Session};

pub use stats::{aggregate_results, test_rule, AggregateReport, RuleTestResult, TestUsed};

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("expected {expected}, found `{found}`")]
    Syntax { expected: String, found: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
    #[error("unknown outcome `{0}`")]
    UnknownOutcome(String),
    #[error("malformed week `{0}`")]
    MalformedWeek(String),
    #[error("week {week} is outside session weeks 1..={weeks}")]
    WeekOutOfRange { week: u32, weeks: u32 },
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

macro_rules! vocabulary {
    ($name:ident, $err:ident, { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = RuleError;
            fn from_str(s: &str) -> Result<Self, RuleError> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(RuleError::$err(s.to_string())),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

vocabulary!(Attribute, UnknownAttribute, {
    Any => "any",
    EarlyJoiner => "early_joiner",
    HighWeek1Activity => "high_week1_activity",
    LowWeek1Activity => "low_week1_activity",
});

vocabulary!(OperatorKind, UnknownOperator, {
    PostsInForum => "posts_in_forum",
    SubmitsAssignment => "submits_assignment",
    Active => "active",
    Inactive => "inactive",
});

vocabulary!(Outcome, UnknownOutcome, {
    Dropout => "dropout",
    Completion => "completion",
});

impl Outcome {
    pub fn flipped(self) -> Self {
        match self {
            Outcome::Dropout => Outcome::Completion,
            Outcome::Completion => Outcome::Dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operator {
    pub kind: OperatorKind,
    pub week: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductionRule {
    pub attribute: Attribute,
    pub operator: Operator,
    pub outcome: Outcome,
    pub source_text: String,
}

impl fmt::Display for ProductionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("if a student ")?;
        if self.attribute != Attribute::Any {
            write!(f, "who is {} ", self.attribute)?;
        }
        write!(
            f,
            "does {}(week={}) then {}",
            self.operator.kind, self.operator.week, self.outcome
        )
    }
}

fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() || matches!(ch, '(' | ')' | '=') {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

struct Cursor {
    tokens: Vec<String>,
    pos: usize,
}

impl Cursor {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn next(&mut self, expected: &str) -> Result<String, RuleError> {
        let tok = self
            .tokens
            .get(self.pos)
            .cloned()
            .ok_or_else(|| RuleError::Syntax {
                expected: expected.to_string(),
                found: "end of rule".into(),
            })?;
        self.pos += 1;
        Ok(tok)
    }

    fn expect(&mut self, word: &str) -> Result<(), RuleError> {
        let tok = self.next(&format!("`{word}`"))?;
        if tok != word {
            return Err(RuleError::Syntax {
                expected: format!("`{word}`"),
                found: tok,
            });
        }
        Ok(())
    }
}

/// Parses one rule:
/// `if a student [who is <attribute>] does <operator>(week=<n>) then <outcome>`.
/// Keywords and vocabulary are case-insensitive.
pub fn parse_rule(text: &str) -> Result<ProductionRule, RuleError> {
    let mut cur = Cursor {
        tokens: tokenize(text),
        pos: 0,
    };
    for w in ["if", "a", "student"] {
        cur.expect(w)?;
    }
    let attribute = if cur.peek() == Some("who") {
        cur.pos += 1;
        cur.expect("is")?;
        cur.next("an attribute")?.parse()?
    } else {
        Attribute::Any
    };
    cur.expect("does")?;
    let kind: OperatorKind = cur.next("an operator")?.parse()?;
    cur.expect("(")?;
    cur.expect("week")?;
    cur.expect("=")?;
    let week_tok = cur.next("a week number")?;
    let week = week_tok
        .parse::<u32>()
        .ok()
        .filter(|w| *w >= 1)
        .ok_or(RuleError::MalformedWeek(week_tok))?;
    cur.expect(")")?;
    cur.expect("then")?;
    let outcome: Outcome = cur.next("an outcome")?.parse()?;
    if let Some(extra) = cur.peek() {
        return Err(RuleError::Syntax {
            expected: "end of rule".into(),
            found: extra.to_string(),
        });
    }
    Ok(ProductionRule {
        attribute,
        operator: Operator { kind, week },
        outcome,
        source_text: text.trim().to_string(),
    })
}

/// Counts `[[a, b], [c, d]]`: rows split on the antecedent, columns on the
/// outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub course_id: String,
    pub session_id: String,
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable {
            course_id: String::new(),
            session_id: String::new(),
            a,
            b,
            c,
            d,
        }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// `a/(a+b) − c/(c+d)`, or `None` when a row is empty.
    pub fn rate_difference(&self) -> Option<f64> {
        let r1 = self.a + self.b;
        let r2 = self.c + self.d;
        (r1 > 0 && r2 > 0).then(|| self.a as f64 / r1 as f64 - self.c as f64 / r2 as f64)
    }
}

fn week1_median(activity: &SessionActivity, labels: &LabelTable) -> f64 {
    let mut counts: Vec<u32> = labels
        .rows
        .iter()
        .map(|r| {
            activity
                .users
                .get(&r.user_id)
                .and_then(|u| u.events_per_week.first().copied())
                .unwrap_or(0)
        })
        .collect();
    counts.sort_unstable();
    let n = counts.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] as f64 + counts[n / 2] as f64) / 2.0
    }
}

/// Tabulates a rule over pre-computed session activity. Users are those in
/// `labels`; the attribute selects the eligible subset.
pub fn tabulate(
    rule: &ProductionRule,
    activity: &SessionActivity,
    labels: &LabelTable,
) -> Result<ContingencyTable, RuleError> {
    let weeks = activity.metadata.weeks;
    let week = rule.operator.week;
    if week == 0 || week > weeks {
        return Err(RuleError::WeekOutOfRange { week, weeks });
    }
    let median = week1_median(activity, labels);
    let mut table = ContingencyTable::new(0, 0, 0, 0);
    table.course_id = activity.metadata.course_id.clone();
    table.session_id = activity.metadata.session_id.clone();
    let w = week as usize - 1;

    for row in &labels.rows {
        let act = activity.users.get(&row.user_id);
        let at = |v: fn(&crate::bundle::UserActivity) -> &Vec<u32>, i: usize| {
            act.and_then(|a| v(a).get(i).copied()).unwrap_or(0)
        };
        let week1 = at(|a| &a.events_per_week, 0) as f64;
        let eligible = match rule.attribute {
            Attribute::Any => true,
            Attribute::EarlyJoiner => act.and_then(|a| a.first_active_week()) == Some(1),
            Attribute::HighWeek1Activity => week1 > median,
            Attribute::LowWeek1Activity => week1 <= median,
        };
        if !eligible {
            continue;
        }
        let antecedent = match rule.operator.kind {
            OperatorKind::PostsInForum => at(|a| &a.posts_per_week, w) > 0,
            OperatorKind::SubmitsAssignment => at(|a| &a.submissions_per_week, w) > 0,
            OperatorKind::Active => at(|a| &a.events_per_week, w) > 0,
            OperatorKind::Inactive => at(|a| &a.events_per_week, w) == 0,
        };
        let outcome = match rule.outcome {
            Outcome::Dropout => row.dropout == 1,
            Outcome::Completion => row.dropout == 0,
        };
        match (antecedent, outcome) {
            (true, true) => table.a += 1,
            (true, false) => table.b += 1,
            (false, true) => table.c += 1,
            (false, false) => table.d += 1,
        }
    }
    Ok(table)
}

/// Evaluates a rule against one session's bundle.
pub fn evaluate_rule(
    rule: &ProductionRule,
    session: &Session,
    labels: &LabelTable,
) -> Result<ContingencyTable, RuleError> {
    let activity = session.bundle.activity()?;
    tabulate(rule, &activity, labels)
}
