//! Versioned prompt templates and answer parsing.
//!
//! Templates live as plain-text data files under `templates/` and are
//! compiled in with `include_str!`. Placeholders are `{identifier}`; any
//! other brace sequence (such as the JSON example in the detective prompt) is
//! literal text. Rendering is a single pass, so braces inside bound values are
//! never expanded.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: &'static str,
    pub system: &'static str,
    pub user: &'static str,
}

/// A rendered system/user message pair, tagged with the template it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: String,
    pub system: String,
    pub user: String,
}

pub type Bindings = BTreeMap<String, String>;

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut literal_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let start = i + 1;
            let mut j = start;
            while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_') {
                j += 1;
            }
            let ident_ok = j > start && !bytes[start].is_ascii_digit();
            if ident_ok && j < bytes.len() && bytes[j] == b'}' {
                if literal_start < i {
                    out.push(Piece::Text(&text[literal_start..i]));
                }
                out.push(Piece::Slot(&text[start..j]));
                i = j + 1;
                literal_start = i;
                continue;
            }
        }
        i += 1;
    }
    if literal_start < text.len() {
        out.push(Piece::Text(&text[literal_start..]));
    }
    out
}

/// Placeholder names appearing in `text`.
pub fn placeholders(text: &str) -> BTreeSet<String> {
    pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Slot(name) => Some(name.to_string()),
            Piece::Text(_) => None,
        })
        .collect()
}

/// Substitutes every placeholder in `text` from `bindings`.
///
/// Fails on a placeholder with no binding and on a binding with no matching
/// placeholder.
pub fn render(template_id: &str, text: &str, bindings: &Bindings) -> Result<String> {
    let manifest = placeholders(text);
    if let Some(extra) = bindings.keys().find(|k| !manifest.contains(*k)) {
        return Err(Error::UnknownPlaceholder {
            template: template_id.to_string(),
            name: extra.clone(),
        });
    }
    fill(template_id, text, bindings)
}

fn fill(template_id: &str, text: &str, bindings: &Bindings) -> Result<String> {
    let mut out = String::with_capacity(text.len() + bindings.values().map(String::len).sum::<usize>());
    for piece in pieces(text) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(name) => match bindings.get(name) {
                Some(value) => out.push_str(value),
                None => {
                    return Err(Error::MissingPlaceholder {
                        template: template_id.to_string(),
                        name: name.to_string(),
                    })
                }
            },
        }
    }
    Ok(out)
}

impl PromptTemplate {
    /// Union of the placeholders in the system and user texts.
    pub fn manifest(&self) -> BTreeSet<String> {
        let mut m = placeholders(self.system);
        m.extend(placeholders(self.user));
        m
    }

    pub fn render(&self, bindings: &Bindings) -> Result<RenderedPrompt> {
        let manifest = self.manifest();
        if let Some(extra) = bindings.keys().find(|k| !manifest.contains(*k)) {
            return Err(Error::UnknownPlaceholder {
                template: self.id.to_string(),
                name: extra.clone(),
            });
        }
        Ok(RenderedPrompt {
            template_id: self.id.to_string(),
            system: fill(self.id, self.system, bindings)?,
            user: fill(self.id, self.user, bindings)?,
        })
    }

    /// Hex SHA-256 over the id and both texts; used as a cache key component.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update([0u8]);
        h.update(self.system.as_bytes());
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

pub const SESSION_SUMMARY: PromptTemplate = PromptTemplate {
    id: "session-summary@v1",
    system: "",
    user: include_str!("../templates/session_summary.user.txt"),
};

pub const UPDATE: PromptTemplate = PromptTemplate {
    id: "update@v1",
    system: include_str!("../templates/update.system.txt"),
    user: include_str!("../templates/update.user.txt"),
};

pub const ANSWER_DETECTIVE: PromptTemplate = PromptTemplate {
    id: "answer-detective@v1",
    system: include_str!("../templates/answer_detective.system.txt"),
    user: include_str!("../templates/answer_detective.user.txt"),
};

pub const ANSWER_OPEN_QA: PromptTemplate = PromptTemplate {
    id: "answer-open-qa@v1",
    system: include_str!("../templates/answer_open_qa.system.txt"),
    user: include_str!("../templates/answer_open_qa.user.txt"),
};

pub const ANSWER_CLAIM: PromptTemplate = PromptTemplate {
    id: "answer-claim@v1",
    system: include_str!("../templates/answer_claim.system.txt"),
    user: include_str!("../templates/answer_claim.user.txt"),
};

pub fn shipped_templates() -> [&'static PromptTemplate; 5] {
    [&SESSION_SUMMARY, &UPDATE, &ANSWER_DETECTIVE, &ANSWER_OPEN_QA, &ANSWER_CLAIM]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Four-way multiple choice, answered as a letter.
    Detective,
    /// Free-form short answer.
    OpenQa,
    /// TRUE/FALSE claim verification.
    Claim,
}

impl TaskKind {
    pub fn answer_template(self) -> &'static PromptTemplate {
        match self {
            TaskKind::Detective => &ANSWER_DETECTIVE,
            TaskKind::OpenQa => &ANSWER_OPEN_QA,
            TaskKind::Claim => &ANSWER_CLAIM,
        }
    }

    /// Builds the answer-prompt bindings. `context` is the composed generator
    /// context; for claims `question` carries the statement.
    pub fn answer_bindings(self, context: &str, question: &str, options: &[String]) -> Bindings {
        let mut b = Bindings::new();
        match self {
            TaskKind::Detective => {
                b.insert("answer_context".into(), context.to_string());
                b.insert("question".into(), question.to_string());
                b.insert("options_str".into(), format_options(options));
            }
            TaskKind::OpenQa => {
                b.insert("context".into(), context.to_string());
                b.insert("question".into(), question.to_string());
            }
            TaskKind::Claim => {
                b.insert("context".into(), context.to_string());
                b.insert("claim".into(), question.to_string());
            }
        }
        b
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detective" => Ok(TaskKind::Detective),
            "open_qa" | "open-qa" => Ok(TaskKind::OpenQa),
            "claim" => Ok(TaskKind::Claim),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Renders options as `A. ...` lines; empty for open-ended questions.
pub fn format_options(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {}", (b'A' + i as u8) as char, o))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Answer {
    Choice(char),
    Phrase(String),
    Verdict(bool),
}

impl Answer {
    /// The canonical model output that parses back to `self`.
    pub fn canonical(&self) -> String {
        match self {
            Answer::Choice(c) => format!("{{\"answer\":\"{c}\",\"reasoning\":\"\"}}"),
            Answer::Phrase(p) => p.clone(),
            Answer::Verdict(v) => format!(
                "<explanation></explanation>\n<answer>{}</answer>",
                if *v { "TRUE" } else { "FALSE" }
            ),
        }
    }

    /// Text form used for scoring and reports.
    pub fn as_text(&self) -> String {
        match self {
            Answer::Choice(c) => c.to_string(),
            Answer::Phrase(p) => p.clone(),
            Answer::Verdict(v) => if *v { "TRUE" } else { "FALSE" }.to_string(),
        }
    }
}

fn choice_letter(s: &str) -> Option<char> {
    let s = s.trim();
    let mut chars = s.chars();
    let first = chars.next()?.to_ascii_uppercase();
    if !('A'..='D').contains(&first) {
        return None;
    }
    match chars.next() {
        None => Some(first),
        Some(c) if !c.is_alphanumeric() => Some(first),
        _ => None,
    }
}

fn first_json_answer(text: &str) -> Option<String> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            if let Some(serde_json::Value::String(ans)) = map.get("answer") {
                return Some(ans.clone());
            }
        }
    }
    None
}

/// Extracts the content of the first `<tag>...</tag>` block.
pub(crate) fn tag_content<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close).map(|e| start + e).unwrap_or(text.len());
    Some(&text[start..end])
}

pub fn parse_answer(text: &str, kind: TaskKind) -> Result<Answer> {
    match kind {
        TaskKind::Detective => {
            let raw = first_json_answer(text)
                .ok_or_else(|| Error::UnparseableAnswer("no JSON object with an \"answer\" field".into()))?;
            choice_letter(&raw)
                .map(Answer::Choice)
                .ok_or_else(|| Error::UnparseableAnswer(format!("answer {raw:?} is not one of A-D")))
        }
        TaskKind::OpenQa => {
            let t = text.trim();
            let t = t.strip_prefix("Answer:").map(str::trim).unwrap_or(t);
            Ok(Answer::Phrase(t.to_string()))
        }
        TaskKind::Claim => {
            let raw = tag_content(text, "answer")
                .ok_or_else(|| Error::UnparseableAnswer("no <answer> tag".into()))?
                .trim()
                .to_ascii_uppercase();
            match raw.as_str() {
                "TRUE" => Ok(Answer::Verdict(true)),
                "FALSE" => Ok(Answer::Verdict(false)),
                _ => Err(Error::UnparseableAnswer(format!("verdict {raw:?} is not TRUE/FALSE"))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bindings(pairs: &[(&str, &str)]) -> Bindings {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn update_bindings() -> Bindings {
        bindings(&[
            ("question", "Who poisoned Dora?"),
            ("options_str", ""),
            ("step", "2"),
            ("max_steps", "3"),
            ("remaining_steps_hint", "1 step remaining"),
            ("signature", "sig"),
            ("current_query", "q"),
            ("summaries_text", "s"),
            ("evidence_memory", "- e"),
            ("chunks_text", "c"),
            ("history_section", ""),
        ])
    }

    #[test]
    fn manifests() {
        assert_eq!(
            SESSION_SUMMARY.manifest(),
            ["idx", "raw_text", "total"].iter().map(|s| s.to_string()).collect()
        );
        assert_eq!(UPDATE.manifest().len(), 11);
        assert_eq!(
            ANSWER_DETECTIVE.manifest(),
            ["answer_context", "options_str", "question"].iter().map(|s| s.to_string()).collect()
        );
        assert!(ANSWER_CLAIM.manifest().contains("claim"));
    }

    #[test]
    fn update_renders_step_counter() {
        let r = UPDATE.render(&update_bindings()).unwrap();
        assert!(r.user.contains("Step 2/3 | 1 step remaining"));
        assert!(r.system.starts_with("You are a retrieval planning agent."));
        assert!(!r.user.contains("{question}"));
    }

    #[test]
    fn missing_and_unknown_bindings() {
        let mut b = update_bindings();
        b.remove("question");
        assert!(matches!(
            UPDATE.render(&b),
            Err(Error::MissingPlaceholder { name, .. }) if name == "question"
        ));
        let mut b = update_bindings();
        b.insert("bogus".into(), "x".into());
        assert!(matches!(UPDATE.render(&b), Err(Error::UnknownPlaceholder { name, .. }) if name == "bogus"));
    }

    #[test]
    fn braces_in_values_are_literal() {
        let b = bindings(&[("idx", "{total}"), ("total", "3"), ("raw_text", "{raw_text} {x}")]);
        let r = SESSION_SUMMARY.render(&b).unwrap();
        assert!(r.user.contains("(Part {total}/3)"));
        assert!(r.user.contains("<Raw_Text>\n{raw_text} {x}\n</Raw_Text>"));
    }

    #[test]
    fn json_braces_are_not_placeholders() {
        assert!(ANSWER_DETECTIVE.user.contains(r#"{"answer":"x","reasoning":"xxx"}"#));
        let p = placeholders(r#"{"answer":"x"} {a1} {1a} {} {a-b}"#);
        assert_eq!(p, ["a1"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn template_hash_changes_with_text() {
        let mut t = SESSION_SUMMARY.clone();
        let h = t.content_hash();
        assert_eq!(h.len(), 64);
        t.user = "different";
        assert_ne!(h, t.content_hash());
    }

    #[test]
    fn parse_detective() {
        assert_eq!(
            parse_answer(r#"{"answer":"D","reasoning":"..."}"#, TaskKind::Detective).unwrap(),
            Answer::Choice('D')
        );
        let noisy = "Sure! Here you go:\n```json\n{\"answer\": \"b\", \"reasoning\": \"the pill {was} swapped\"}\n```";
        assert_eq!(parse_answer(noisy, TaskKind::Detective).unwrap(), Answer::Choice('B'));
        assert!(matches!(
            parse_answer("The answer is maybe", TaskKind::Detective),
            Err(Error::UnparseableAnswer(_))
        ));
        assert!(matches!(
            parse_answer(r#"{"answer":"E"}"#, TaskKind::Detective),
            Err(Error::UnparseableAnswer(_))
        ));
    }

    #[test]
    fn parse_claim_and_open() {
        assert_eq!(parse_answer("<answer>TRUE</answer>", TaskKind::Claim).unwrap(), Answer::Verdict(true));
        assert_eq!(
            parse_answer("<explanation>x</explanation>\n<answer> false </answer>", TaskKind::Claim).unwrap(),
            Answer::Verdict(false)
        );
        assert!(parse_answer("TRUE", TaskKind::Claim).is_err());
        assert_eq!(
            parse_answer("  Answer: the vicarage \n", TaskKind::OpenQa).unwrap(),
            Answer::Phrase("the vicarage".into())
        );
    }

    #[test]
    fn options_are_lettered() {
        let opts = vec!["poison".to_string(), "knife".to_string()];
        assert_eq!(format_options(&opts), "A. poison\nB. knife");
        assert_eq!(format_options(&[]), "");
    }

    proptest! {
        #[test]
        fn canonical_answers_round_trip(
            letter in prop::sample::select(vec!['A', 'B', 'C', 'D']),
            phrase in "[a-z][a-z ]{0,30}[a-z]",
            verdict in any::<bool>(),
        ) {
            for (ans, kind) in [
                (Answer::Choice(letter), TaskKind::Detective),
                (Answer::Phrase(phrase.clone()), TaskKind::OpenQa),
                (Answer::Verdict(verdict), TaskKind::Claim),
            ] {
                prop_assert_eq!(parse_answer(&ans.canonical(), kind).unwrap(), ans);
            }
        }

        #[test]
        fn render_is_exact_substitution(value in "[^{}\u{0}]{0,40}") {
            let b = bindings(&[("idx", &value), ("total", "9"), ("raw_text", "")]);
            let r = SESSION_SUMMARY.render(&b).unwrap();
            let expected = SESSION_SUMMARY.user
                .replacen("{idx}", &value, 1)
                .replacen("{raw_text}", "", 1);
            // {total} is the only remaining placeholder and appears once
            prop_assert_eq!(r.user, expected.replacen("{total}", "9", 1));
        }
    }
}
