//! The `doc_to_text` template mini-language.
//!
//! A template is literal text with `{{ ... }}` placeholders. A placeholder names
//! a record field, optionally indexes into it (`choices[2]`) and optionally
//! strips surrounding whitespace (`question.strip()`). Nothing else is accepted.

use std::fmt;

use crate::dataset::{Record, Value};

use super::TaskError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    pub field: String,
    pub index: Option<usize>,
    pub strip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Field(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self, TaskError> {
        let mut segments = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find("{{") {
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| TaskError::BadTemplate {
                reason: format!("unterminated placeholder at byte {}", source.len() - rest.len() + open),
            })?;
            segments.push(Segment::Field(parse_placeholder(&after[..close])?));
            rest = &after[close + 2..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(Self { source: source.to_string(), segments })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &Placeholder> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Field(p) => Some(p),
            Segment::Literal(_) => None,
        })
    }

    pub fn render(&self, record: &Record) -> Result<String, TaskError> {
        let mut out = String::with_capacity(self.source.len() + 64);
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Field(p) => out.push_str(&render_placeholder(p, record)?),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn parse_placeholder(body: &str) -> Result<Placeholder, TaskError> {
    let bad = |reason: &str| TaskError::BadTemplate { reason: format!("{reason} in `{{{{{body}}}}}`") };
    let mut expr = body.trim();

    let mut strip = false;
    if let Some(head) = expr.strip_suffix(".strip()") {
        strip = true;
        expr = head.trim_end();
    }

    let mut index = None;
    if let Some(head) = expr.strip_suffix(']') {
        let open = head.rfind('[').ok_or_else(|| bad("unbalanced `]`"))?;
        let digits = head[open + 1..].trim();
        let value = digits.parse::<usize>().map_err(|_| bad("index is not a non-negative integer"))?;
        index = Some(value);
        expr = head[..open].trim_end();
    }

    if expr.is_empty() {
        return Err(bad("empty field name"));
    }
    let mut chars = expr.chars();
    let first = chars.next().unwrap_or('0');
    if !(first.is_ascii_alphabetic() || first == '_') || !chars.all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(bad("unsupported expression"));
    }
    Ok(Placeholder { field: expr.to_string(), index, strip })
}

fn render_placeholder(p: &Placeholder, record: &Record) -> Result<String, TaskError> {
    let value = record.get(&p.field).ok_or_else(|| TaskError::MissingRecordField {
        record_id: record.id.clone(),
        field: p.field.clone(),
    })?;
    let mismatch = |expected: &str| TaskError::TypeMismatch {
        record_id: record.id.clone(),
        field: p.field.clone(),
        expected: expected.to_string(),
    };
    let text = match (p.index, value) {
        (Some(i), Value::List(items)) => items.get(i).cloned().ok_or_else(|| TaskError::IndexOutOfBounds {
            record_id: record.id.clone(),
            field: p.field.clone(),
            index: i,
            len: items.len(),
        })?,
        (Some(_), _) => return Err(mismatch("list")),
        (None, Value::Str(s)) => s.clone(),
        (None, Value::Int(n)) if !p.strip => n.to_string(),
        (None, Value::Int(_)) => return Err(mismatch("string")),
        (None, Value::List(_)) => return Err(mismatch("string")),
    };
    Ok(if p.strip { text.trim().to_string() } else { text })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pairs: &[(&str, Value)]) -> Record {
        Record::new("r1", pairs.iter().map(|(k, v)| (k.to_string(), v.clone())))
    }

    #[test]
    fn identity_placeholder() {
        let t = PromptTemplate::parse("{{question}}").unwrap();
        assert_eq!(t.render(&rec(&[("question", Value::from("x"))])).unwrap(), "x");
    }

    #[test]
    fn parses_index_and_strip() {
        let t = PromptTemplate::parse("{{ question.strip() }}-{{choices[3]}}").unwrap();
        let ps: Vec<_> = t.placeholders().cloned().collect();
        assert_eq!(
            ps,
            vec![
                Placeholder { field: "question".into(), index: None, strip: true },
                Placeholder { field: "choices".into(), index: Some(3), strip: false },
            ]
        );
    }

    #[test]
    fn index_then_strip_is_allowed() {
        let t = PromptTemplate::parse("{{choices[0].strip()}}").unwrap();
        let r = rec(&[("choices", Value::List(vec!["  a ".into()]))]);
        assert_eq!(t.render(&r).unwrap(), "a");
    }

    #[test]
    fn rejects_bad_syntax() {
        for src in ["{{question", "{{}}", "{{question.upper()}}", "{{choices[-1]}}", "{{a b}}", "{{x]}}"] {
            assert!(
                matches!(PromptTemplate::parse(src), Err(TaskError::BadTemplate { .. })),
                "accepted {src:?}"
            );
        }
    }

    #[test]
    fn type_errors() {
        let r = rec(&[("question", Value::from("q")), ("choices", Value::List(vec!["a".into()]))]);
        let idx_on_str = PromptTemplate::parse("{{question[0]}}").unwrap();
        assert!(matches!(idx_on_str.render(&r), Err(TaskError::TypeMismatch { .. })));
        let strip_list = PromptTemplate::parse("{{choices.strip()}}").unwrap();
        assert!(matches!(strip_list.render(&r), Err(TaskError::TypeMismatch { .. })));
        let missing = PromptTemplate::parse("{{subject}}").unwrap();
        assert!(matches!(missing.render(&r), Err(TaskError::MissingRecordField { .. })));
        let oob = PromptTemplate::parse("{{choices[1]}}").unwrap();
        assert!(matches!(oob.render(&r), Err(TaskError::IndexOutOfBounds { index: 1, len: 1, .. })));
    }

    #[test]
    fn literal_braces_without_placeholder_pass_through() {
        let t = PromptTemplate::parse("a } b }} c").unwrap();
        assert_eq!(t.render(&rec(&[])).unwrap(), "a } b }} c");
    }
}
