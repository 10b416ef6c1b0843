//! Parsers turning raw platform export archives into canonical records.
//!
//! The chat export is a JSON list of conversations, each holding a node map
//! that forms a tree (`mapping: {id: {message, parent, children}}`). Only
//! items authored by the human user survive; assistant, system, and tool
//! items are dropped. Activity logs are the JSON Takeout form: a list of
//! `{title, time, titleUrl?}` entries whose title carries an action phrase
//! such as `Searched for ` or `Watched `.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{DataStreamKind, DemographicProfile, Message, MessageStream, UserRecord};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("decode error in {scope}: {reason}")]
    DecodeError { scope: String, reason: String },
    #[error("schema error in conversation {conversation}: {reason}")]
    SchemaError {
        conversation: String,
        reason: String,
    },
    #[error("activity logs cannot carry kind {0}")]
    UnsupportedKind(DataStreamKind),
    #[error("duplicate stream: user {user_id} already has a {kind} stream")]
    DuplicateStream {
        user_id: String,
        kind: DataStreamKind,
    },
}

// --- Chat export schema -----------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawConversation {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    create_time: Option<f64>,
    #[serde(default)]
    mapping: BTreeMap<String, RawNode>,
}

impl RawConversation {
    fn label(&self, position: usize) -> String {
        self.id
            .clone()
            .or_else(|| self.title.clone())
            .unwrap_or_else(|| format!("#{position}"))
    }
}

#[derive(Debug, Deserialize)]
struct RawNode {
    #[serde(default)]
    message: Option<RawMessage>,
    #[serde(default)]
    parent: Option<String>,
    #[serde(default)]
    children: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawMessage {
    author: RawAuthor,
    #[serde(default)]
    create_time: Option<f64>,
    #[serde(default)]
    content: Option<RawContent>,
}

#[derive(Debug, Deserialize)]
struct RawAuthor {
    role: String,
}

#[derive(Debug, Deserialize)]
struct RawContent {
    #[serde(default)]
    parts: Option<Vec<serde_json::Value>>,
}

impl RawContent {
    /// Multi-part contents concatenate with single newlines; non-string
    /// parts (images and similar) are skipped.
    fn joined_text(&self) -> String {
        self.parts
            .as_deref()
            .unwrap_or_default()
            .iter()
            .filter_map(|p| p.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Parse an export archive into the user's chat stream: user-authored items
/// only, merged across conversations, sorted ascending by message create
/// time (messages lacking one inherit their conversation's create time;
/// remaining ties keep archive traversal order), then re-indexed from 0.
pub fn parse_chat_export(archive: &[u8]) -> Result<MessageStream, IngestError> {
    let conversations: Vec<RawConversation> =
        serde_json::from_slice(archive).map_err(|e| IngestError::DecodeError {
            scope: "chat export archive".to_string(),
            reason: e.to_string(),
        })?;

    // (effective_time, traversal_position, text)
    let mut collected: Vec<(Option<f64>, usize, String)> = Vec::new();

    for (pos, conversation) in conversations.iter().enumerate() {
        let label = conversation.label(pos);

        // Validate the forest: every named parent must exist.
        for (node_id, node) in &conversation.mapping {
            if let Some(parent) = &node.parent {
                if !conversation.mapping.contains_key(parent) {
                    return Err(IngestError::SchemaError {
                        conversation: label.clone(),
                        reason: format!("node {node_id} names missing parent {parent}"),
                    });
                }
            }
        }

        // Depth-first from each root, following children order; roots in
        // node-id order. This is the archive traversal order used for ties.
        let roots: Vec<&String> = conversation
            .mapping
            .iter()
            .filter(|(_, node)| node.parent.is_none())
            .map(|(id, _)| id)
            .collect();

        let mut visited: BTreeSet<&str> = BTreeSet::new();
        let mut stack: Vec<&String> = roots.into_iter().rev().collect();
        while let Some(node_id) = stack.pop() {
            if !visited.insert(node_id) {
                return Err(IngestError::SchemaError {
                    conversation: label.clone(),
                    reason: format!("node {node_id} reachable twice; mapping is not a forest"),
                });
            }
            let node =
                conversation
                    .mapping
                    .get(node_id)
                    .ok_or_else(|| IngestError::SchemaError {
                        conversation: label.clone(),
                        reason: format!("child id {node_id} missing from mapping"),
                    })?;
            for child in node.children.iter().rev() {
                stack.push(child);
            }

            let Some(message) = &node.message else {
                continue;
            };
            if message.author.role != "user" {
                continue;
            }
            let text = message
                .content
                .as_ref()
                .map(RawContent::joined_text)
                .unwrap_or_default();
            if text.trim().is_empty() {
                continue;
            }
            let time = message.create_time.or(conversation.create_time);
            collected.push((time, collected.len(), text));
        }
    }

    // Stable sort: undated messages sink to the end in traversal order.
    collected.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });

    Ok(MessageStream(
        collected
            .into_iter()
            .enumerate()
            .map(|(index, (timestamp, _, text))| Message {
                index,
                timestamp,
                text,
                source: DataStreamKind::ChatAssistant,
            })
            .collect(),
    ))
}

// --- Activity log schema ----------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawActivityEntry {
    title: String,
    #[serde(default)]
    time: Option<serde_json::Value>,
    #[serde(default, rename = "titleUrl")]
    #[allow(dead_code)]
    title_url: Option<String>,
}

/// Leading action phrases stripped from activity titles; anything else is
/// kept verbatim so localized exports lose nothing.
const ACTION_PREFIXES: [&str; 2] = ["Searched for ", "Watched "];

fn strip_action_phrase(title: &str) -> &str {
    for prefix in ACTION_PREFIXES {
        if let Some(rest) = title.strip_prefix(prefix) {
            return rest;
        }
    }
    title
}

fn parse_entry_time(value: &serde_json::Value, entry: usize) -> Result<Option<f64>, IngestError> {
    match value {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::Number(n) => Ok(n.as_f64()),
        serde_json::Value::String(s) => chrono::DateTime::parse_from_rfc3339(s)
            .map(|dt| {
                let millis = dt.timestamp_millis();
                Some(millis as f64 / 1000.0)
            })
            .map_err(|e| IngestError::DecodeError {
                scope: format!("activity entry {entry}"),
                reason: format!("unparseable time {s:?}: {e}"),
            }),
        other => Err(IngestError::DecodeError {
            scope: format!("activity entry {entry}"),
            reason: format!("unsupported time value: {other}"),
        }),
    }
}

/// Parse a Takeout-style activity log into a stream of queries or watched
/// titles, chronological ascending with 0-based indices.
pub fn parse_search_log(log: &[u8], kind: DataStreamKind) -> Result<MessageStream, IngestError> {
    if kind == DataStreamKind::ChatAssistant {
        return Err(IngestError::UnsupportedKind(kind));
    }
    let entries: Vec<RawActivityEntry> =
        serde_json::from_slice(log).map_err(|e| IngestError::DecodeError {
            scope: "activity log".to_string(),
            reason: e.to_string(),
        })?;

    let mut collected: Vec<(Option<f64>, usize, String)> = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let text = strip_action_phrase(&entry.title).to_string();
        if text.trim().is_empty() {
            continue;
        }
        let time = match &entry.time {
            Some(v) => parse_entry_time(v, i)?,
            None => None,
        };
        collected.push((time, i, text));
    }

    collected.sort_by(|a, b| match (a.0, b.0) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });

    Ok(MessageStream(
        collected
            .into_iter()
            .enumerate()
            .map(|(index, (timestamp, _, text))| Message {
                index,
                timestamp,
                text,
                source: kind,
            })
            .collect(),
    ))
}

// --- Assembly ----------------------------------------------------------------

/// A parsed stream file: which user and source it belongs to.
#[derive(Debug, Clone)]
pub struct StreamFile {
    pub user_id: String,
    pub kind: DataStreamKind,
    pub stream: MessageStream,
}

/// Result of joining streams against the survey table.
#[derive(Debug, Default)]
pub struct AssembledCorpus {
    pub records: Vec<UserRecord>,
    /// One line per surveyed user or stream that could not be emitted.
    pub report: Vec<String>,
}

/// Join parsed streams with the survey table: one record per surveyed user
/// that has at least a ChatAssistant stream. Surveyed users without a chat
/// stream, and streams without a survey row, are reported rather than
/// emitted. Two streams of the same kind for one user are an error.
pub fn assemble_users(
    streams: Vec<StreamFile>,
    survey: &BTreeMap<String, DemographicProfile>,
) -> Result<AssembledCorpus, IngestError> {
    let mut by_user: BTreeMap<String, BTreeMap<DataStreamKind, MessageStream>> = BTreeMap::new();
    let mut report = Vec::new();

    for file in streams {
        let user_streams = by_user.entry(file.user_id.clone()).or_default();
        if user_streams.contains_key(&file.kind) {
            return Err(IngestError::DuplicateStream {
                user_id: file.user_id,
                kind: file.kind,
            });
        }
        user_streams.insert(file.kind, file.stream);
    }

    let mut records = Vec::new();
    for (user_id, profile) in survey {
        match by_user.remove(user_id) {
            Some(streams) if streams.contains_key(&DataStreamKind::ChatAssistant) => {
                records.push(UserRecord {
                    user_id: user_id.clone(),
                    profile: profile.clone(),
                    streams,
                });
            }
            Some(_) => {
                report.push(format!(
                    "user {user_id}: surveyed but has no ChatAssistant stream; skipped"
                ));
            }
            None => {
                report.push(format!(
                    "user {user_id}: surveyed but donated no streams; skipped"
                ));
            }
        }
    }
    for user_id in by_user.keys() {
        report.push(format!(
            "user {user_id}: streams without survey row; skipped"
        ));
    }

    Ok(AssembledCorpus { records, report })
}
