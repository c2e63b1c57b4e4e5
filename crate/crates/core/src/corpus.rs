//! Conversation data model, newline-delimited corpus ingestion, and
//! classification-unit extraction.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Default number of preceding messages carried as snippet context.
pub const DEFAULT_CONTEXT_WINDOW: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write corpus: {0}")]
    Write(#[from] std::io::Error),
    #[error("cannot serialize conversation {id}: {source}")]
    Serialize {
        id: String,
        #[source]
        source: serde_json::Error,
    },
}

/// A malformed corpus line. Carried alongside the good records instead of
/// aborting the load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::User => "USER",
            Role::Assistant => "ASSISTANT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    StandardVoice,
    AdvancedVoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub role: Role,
    pub text: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: f64,
    /// Marks an intentionally empty message body.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Message {
    pub fn new(role: Role, text: impl Into<String>, timestamp: f64) -> Self {
        Message {
            id: None,
            role,
            text: text.into(),
            timestamp,
            empty: false,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub user_id: String,
    pub modality: Modality,
    pub messages: Vec<Message>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Conversation {
    pub fn new(
        id: impl Into<String>,
        user_id: impl Into<String>,
        modality: Modality,
        mut messages: Vec<Message>,
    ) -> Self {
        messages.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        Conversation {
            id: id.into(),
            user_id: user_id.into(),
            modality,
            messages,
            extra: Map::new(),
        }
    }

    /// Calendar date (UTC) of the first message.
    pub fn day_key(&self) -> Option<NaiveDate> {
        self.messages.first().and_then(|m| day_of(m.timestamp))
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.messages.iter().map(|m| m.timestamp).collect()
    }

    /// All message texts joined by newlines; the text a whole-conversation
    /// judgment looks at.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn day_of(timestamp: f64) -> Option<NaiveDate> {
    let secs = timestamp.floor() as i64;
    DateTime::from_timestamp(secs, 0).map(|dt| dt.date_naive())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    UserMsg,
    AssistantMsg,
    Exchange,
    WholeConversation,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Target::UserMsg => "user_msg",
            Target::AssistantMsg => "assistant_msg",
            Target::Exchange => "exchange",
            Target::WholeConversation => "whole_conversation",
        };
        f.write_str(s)
    }
}

/// A user message and the nearest following assistant message.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exchange<'a> {
    pub user_message: &'a Message,
    pub assistant_message: &'a Message,
}

/// What a classifier is asked about: one message, one exchange, or the
/// whole conversation.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitBody<'a> {
    Message(&'a Message),
    Exchange(Exchange<'a>),
    Whole(&'a [Message]),
}

/// A classification unit with up to `k` preceding messages of context.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit<'a> {
    pub target: Target,
    pub context: &'a [Message],
    pub body: UnitBody<'a>,
}

impl Unit<'_> {
    /// Text the unit itself contributes, without context.
    pub fn text(&self) -> String {
        match &self.body {
            UnitBody::Message(m) => m.text.clone(),
            UnitBody::Exchange(ex) => {
                format!("{}\n{}", ex.user_message.text, ex.assistant_message.text)
            }
            UnitBody::Whole(msgs) => msgs
                .iter()
                .map(|m| m.text.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    /// Number of lines the unit occupies in a rendered snippet.
    pub fn line_count(&self) -> usize {
        match &self.body {
            UnitBody::Message(_) => 1,
            UnitBody::Exchange(_) => 2,
            UnitBody::Whole(msgs) => msgs.len(),
        }
    }
}

/// Splits a conversation into the units a classifier of `target` runs on.
pub fn extract_units(conversation: &Conversation, target: Target, k: usize) -> Vec<Unit<'_>> {
    let msgs = conversation.messages.as_slice();
    let context_before = |i: usize| &msgs[i.saturating_sub(k)..i];
    match target {
        Target::UserMsg | Target::AssistantMsg => {
            let role = if target == Target::UserMsg {
                Role::User
            } else {
                Role::Assistant
            };
            msgs.iter()
                .enumerate()
                .filter(|(_, m)| m.role == role)
                .map(|(i, m)| Unit {
                    target,
                    context: context_before(i),
                    body: UnitBody::Message(m),
                })
                .collect()
        }
        Target::Exchange => msgs
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == Role::User)
            .filter_map(|(i, user)| {
                msgs[i + 1..]
                    .iter()
                    .find(|m| m.role == Role::Assistant)
                    .map(|assistant| Unit {
                        target,
                        context: context_before(i),
                        body: UnitBody::Exchange(Exchange {
                            user_message: user,
                            assistant_message: assistant,
                        }),
                    })
            })
            .collect(),
        Target::WholeConversation => vec![Unit {
            target,
            context: &[],
            body: UnitBody::Whole(msgs),
        }],
    }
}

/// Corpus record layouts understood by the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusSchema {
    /// One JSON object per line: `{id, user_id, modality, messages: [{role, text, timestamp}]}`.
    #[default]
    NdjsonV1,
}

#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub conversations: Vec<Conversation>,
    pub errors: Vec<RecordError>,
}

/// Streams conversations from a newline-delimited corpus file. Blank lines
/// are skipped; every other malformed line comes back as a `RecordError`.
pub struct CorpusReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    seen_ids: std::collections::HashSet<String>,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: &Path, schema: CorpusSchema) -> Result<Self, CorpusError> {
        let CorpusSchema::NdjsonV1 = schema;
        let file = File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(BufReader::new(file)))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        CorpusReader {
            lines: reader.lines(),
            line_no: 0,
            seen_ids: Default::default(),
        }
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<Conversation, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            let line = match line {
                Ok(l) => l,
                Err(e) => {
                    return Some(Err(RecordError {
                        line: self.line_no,
                        message: format!("unreadable line: {e}"),
                    }))
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed = parse_record(&line).and_then(|c| {
                if self.seen_ids.insert(c.id.clone()) {
                    Ok(c)
                } else {
                    Err(format!("duplicate conversation id `{}`", c.id))
                }
            });
            return Some(parsed.map_err(|message| RecordError {
                line: self.line_no,
                message,
            }));
        }
    }
}

fn parse_record(line: &str) -> Result<Conversation, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not an object")?;
    for field in ["id", "user_id", "modality", "messages"] {
        if !obj.contains_key(field) {
            return Err(format!("missing required field `{field}`"));
        }
    }
    let messages = obj["messages"].as_array().ok_or("`messages` is not a list")?;
    for (i, m) in messages.iter().enumerate() {
        let m = m
            .as_object()
            .ok_or_else(|| format!("message {i} is not an object"))?;
        for field in ["role", "text", "timestamp"] {
            if !m.contains_key(field) {
                return Err(format!("message {i}: missing required field `{field}`"));
            }
        }
        if !m["timestamp"].is_number() {
            return Err(format!("message {i}: timestamp is not numeric"));
        }
    }
    let mut conv: Conversation =
        serde_json::from_value(value).map_err(|e| format!("schema mismatch: {e}"))?;
    if conv.user_id.is_empty() {
        return Err("empty user_id".into());
    }
    if conv.messages.is_empty() {
        return Err("conversation has no messages".into());
    }
    for (i, m) in conv.messages.iter_mut().enumerate() {
        if m.text.is_empty() && !m.empty {
            return Err(format!("message {i}: empty text without `empty` flag"));
        }
        if m.id.is_none() {
            m.id = Some(format!("{}#{i}", conv.id));
        }
    }
    // stable: equal timestamps keep file order
    conv.messages
        .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(conv)
}

/// Reads a whole corpus, collecting good conversations and record errors.
pub fn load_corpus(path: &Path, schema: CorpusSchema) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    for item in CorpusReader::open(path, schema)? {
        match item {
            Ok(c) => out.conversations.push(c),
            Err(e) => out.errors.push(e),
        }
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, conversations: &[Conversation]) -> Result<(), CorpusError> {
    for c in conversations {
        let line = serde_json::to_string(c).map_err(|source| CorpusError::Serialize {
            id: c.id.clone(),
            source,
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(roles: &[Role]) -> Conversation {
        let msgs = roles
            .iter()
            .enumerate()
            .map(|(i, r)| Message::new(*r, format!("m{i}"), i as f64 * 10.0))
            .collect();
        Conversation::new("c1", "u1", Modality::Text, msgs)
    }

    fn read(text: &str) -> (Vec<Conversation>, Vec<RecordError>) {
        let mut ok = vec![];
        let mut bad = vec![];
        for r in CorpusReader::new(text.as_bytes()) {
            match r {
                Ok(c) => ok.push(c),
                Err(e) => bad.push(e),
            }
        }
        (ok, bad)
    }

    #[test]
    fn empty_input_yields_nothing() {
        let (ok, bad) = read("");
        assert!(ok.is_empty() && bad.is_empty());
    }

    #[test]
    fn minimal_record() {
        let line = r#"{"id":"a","user_id":"u","modality":"text","messages":[{"role":"user","text":"hi","timestamp":1},{"role":"assistant","text":"hello","timestamp":2.5}]}"#;
        let (ok, bad) = read(line);
        assert!(bad.is_empty());
        assert_eq!(ok.len(), 1);
        assert_eq!(extract_units(&ok[0], Target::Exchange, 4).len(), 1);
    }

    #[test]
    fn out_of_order_messages_are_sorted() {
        let line = r#"{"id":"a","user_id":"u","modality":"text","messages":[{"role":"assistant","text":"b","timestamp":20},{"role":"user","text":"a","timestamp":10},{"role":"user","text":"c","timestamp":30}]}"#;
        let (ok, _) = read(line);
        let texts: Vec<_> = ok[0].messages.iter().map(|m| m.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c"]);
    }

    #[test]
    fn malformed_records_report_line_numbers() {
        let text = concat!(
            r#"{"id":"a","user_id":"u","modality":"text","messages":[{"role":"user","text":"x","timestamp":1}]}"#,
            "\n\n",
            r#"{"id":"b","modality":"text","messages":[]}"#,
            "\n",
            r#"{"id":"c","user_id":"u","modality":"text","messages":[{"role":"user","text":"x","timestamp":"noon"}]}"#,
            "\n",
            r#"{"id":"a","user_id":"u","modality":"text","messages":[{"role":"user","text":"x","timestamp":1}]}"#,
            "\n",
            r#"{"id":"d","user_id":"u","modality":"text","messages":[{"role":"user","text":"","timestamp":1}]}"#,
        );
        let (ok, bad) = read(text);
        assert_eq!(ok.len(), 1);
        let lines: Vec<_> = bad.iter().map(|e| e.line).collect();
        assert_eq!(lines, [3, 4, 5, 6]);
        assert!(bad[0].message.contains("user_id"));
        assert!(bad[1].message.contains("timestamp"));
        assert!(bad[2].message.contains("duplicate"));
    }

    #[test]
    fn flagged_empty_text_is_allowed() {
        let line = r#"{"id":"a","user_id":"u","modality":"advanced_voice","messages":[{"role":"user","text":"","empty":true,"timestamp":1}]}"#;
        let (ok, bad) = read(line);
        assert!(bad.is_empty());
        assert_eq!(ok[0].modality, Modality::AdvancedVoice);
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let line = r#"{"id":"a","user_id":"u","modality":"text","source":"export-7","messages":[{"role":"user","text":"x","timestamp":1,"lang":"en"}]}"#;
        let (ok, _) = read(line);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &ok).unwrap();
        let (again, _) = read(std::str::from_utf8(&buf).unwrap());
        assert_eq!(ok, again);
        assert_eq!(again[0].extra["source"], "export-7");
        assert_eq!(again[0].messages[0].extra["lang"], "en");
    }

    #[test]
    fn alternating_roles_give_two_exchanges() {
        use Role::*;
        let c = conv(&[User, Assistant, User, Assistant]);
        assert_eq!(extract_units(&c, Target::Exchange, 4).len(), 2);
    }

    #[test]
    fn consecutive_user_messages_share_the_next_assistant() {
        use Role::*;
        let c = conv(&[User, User, Assistant]);
        let units = extract_units(&c, Target::Exchange, 4);
        let pairs: Vec<_> = units
            .iter()
            .map(|u| match &u.body {
                UnitBody::Exchange(ex) => (
                    ex.user_message.text.clone(),
                    ex.assistant_message.text.clone(),
                ),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            pairs,
            [("m0".into(), "m2".into()), ("m1".into(), "m2".into())]
        );
    }

    #[test]
    fn trailing_user_message_has_no_exchange() {
        use Role::*;
        let c = conv(&[User, Assistant, User]);
        assert_eq!(extract_units(&c, Target::Exchange, 4).len(), 1);
    }

    #[test]
    fn whole_conversation_is_one_unit() {
        use Role::*;
        let c = conv(&[User, Assistant, User]);
        let units = extract_units(&c, Target::WholeConversation, 4);
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].line_count(), 3);
    }

    #[test]
    fn context_window_is_capped() {
        use Role::*;
        let c = conv(&[User, Assistant, User, Assistant, User, Assistant, User]);
        let units = extract_units(&c, Target::UserMsg, 4);
        let ctx: Vec<_> = units.iter().map(|u| u.context.len()).collect();
        assert_eq!(ctx, [0, 2, 4, 4]);
        let units = extract_units(&c, Target::UserMsg, 1);
        assert_eq!(units[3].context[0].text, "m5");
    }

    #[test]
    fn day_key_is_utc_date_of_first_message() {
        let c = Conversation::new(
            "c",
            "u",
            Modality::Text,
            vec![Message::new(Role::User, "x", 86_399.5)],
        );
        assert_eq!(c.day_key().unwrap().to_string(), "1970-01-01");
    }
}
