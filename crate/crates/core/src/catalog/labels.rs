use serde::{Deserialize, Serialize};

use super::Session;
use crate::bundle::BundleError;
use crate::dsl::LabelType;

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("session {0} has no active users")]
    NoUsers(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub user_id: String,
    pub dropout: u8,
    pub dropout_week: u32,
}

impl LabelRow {
    pub fn value(&self, label_type: LabelType) -> u32 {
        match label_type {
            LabelType::Dropout => self.dropout as u32,
            LabelType::DropoutWeek => self.dropout_week,
        }
    }
}

/// Ground-truth labels for one session, sorted by user id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    pub weeks: u32,
    pub rows: Vec<LabelRow>,
}

impl LabelTable {
    /// `user_id,label` CSV for the given label type.
    pub fn to_csv(&self, label_type: LabelType) -> String {
        let mut out = String::from("user_id,label\n");
        for row in &self.rows {
            out.push_str(&format!("{},{}\n", row.user_id, row.value(label_type)));
        }
        out
    }

    pub fn get(&self, user_id: &str) -> Option<&LabelRow> {
        self.rows
            .binary_search_by(|r| r.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn dropout_count(&self) -> usize {
        self.rows.iter().filter(|r| r.dropout == 1).count()
    }
}

/// Labels every user with at least one clickstream event in the course span.
///
/// The dropout week is the last week with any activity; a user drops out
/// when that week precedes the final course week. The table carries both
/// label columns regardless of `label_type`.
pub fn extract_labels(session: &Session, _label_type: LabelType) -> Result<LabelTable, LabelError> {
    let activity = session.bundle.activity()?;
    let weeks = activity.metadata.weeks;
    let rows: Vec<LabelRow> = activity
        .users
        .into_iter()
        .filter_map(|(user_id, act)| {
            act.last_active_week().map(|last| LabelRow {
                user_id,
                dropout: u8::from(last < weeks),
                dropout_week: last,
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(LabelError::NoUsers(session.session_id.clone()));
    }
    Ok(LabelTable { weeks, rows })
}
