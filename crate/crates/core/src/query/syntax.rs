//! Text form of [`BooleanQuery`] for each registry dialect.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BooleanQuery, QueryError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// E-utilities search syntax: quoted phrases with a field tag.
    PublicationRegistry,
    /// Trial registry expression syntax: quoted phrases, no field tags.
    TrialRegistry,
    /// The offline fixture index: bare words where unambiguous.
    Fixture,
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dialect::PublicationRegistry => "publication_registry",
            Dialect::TrialRegistry => "trial_registry",
            Dialect::Fixture => "fixture",
        })
    }
}

impl FromStr for Dialect {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "publication_registry" | "pubmed" => Ok(Dialect::PublicationRegistry),
            "trial_registry" | "ctgov" => Ok(Dialect::TrialRegistry),
            "fixture" => Ok(Dialect::Fixture),
            other => Err(QueryError::UnsupportedDialect(other.to_string())),
        }
    }
}

/// Per-dialect serialization settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialectOptions {
    /// Field tag appended to publication-registry terms, e.g. `tiab`.
    pub field_tag: Option<String>,
}

impl Default for DialectOptions {
    fn default() -> Self {
        Self { field_tag: Some("tiab".to_string()) }
    }
}

pub fn serialize_query(query: &BooleanQuery, dialect: Dialect) -> Result<String, QueryError> {
    serialize_query_with(query, dialect, &DialectOptions::default())
}

/// Fully parenthesized text: every AND/OR group is wrapped, a single-child
/// group becomes its parenthesized child.
pub fn serialize_query_with(
    query: &BooleanQuery,
    dialect: Dialect,
    options: &DialectOptions,
) -> Result<String, QueryError> {
    query.validate()?;
    let mut out = String::new();
    write_node(query, dialect, options, &mut out);
    Ok(out)
}

fn write_node(q: &BooleanQuery, dialect: Dialect, options: &DialectOptions, out: &mut String) {
    match q {
        BooleanQuery::Term(t) => write_term(t, dialect, options, out),
        BooleanQuery::And(c) | BooleanQuery::Or(c) => {
            let op = if matches!(q, BooleanQuery::And(_)) { " AND " } else { " OR " };
            out.push('(');
            for (i, child) in c.iter().enumerate() {
                if i > 0 {
                    out.push_str(op);
                }
                write_node(child, dialect, options, out);
            }
            out.push(')');
        }
    }
}

fn is_bare_safe(term: &str) -> bool {
    term.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !term.eq_ignore_ascii_case("and")
        && !term.eq_ignore_ascii_case("or")
}

fn write_term(term: &str, dialect: Dialect, options: &DialectOptions, out: &mut String) {
    if dialect == Dialect::Fixture && is_bare_safe(term) {
        out.push_str(term);
        return;
    }
    out.push('"');
    for c in term.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    if dialect == Dialect::PublicationRegistry {
        if let Some(tag) = &options.field_tag {
            out.push('[');
            out.push_str(tag);
            out.push(']');
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    And,
    Or,
    Word(String),
    Quoted(String),
    Tag,
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let mut toks = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    let err = |pos: usize, msg: &str| QueryError::Syntax { position: pos, message: msg.to_string() };
    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                toks.push((pos, Tok::LParen));
                i += 1;
            }
            ')' => {
                toks.push((pos, Tok::RParen));
                i += 1;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    let Some(&(_, c)) = chars.get(i) else {
                        return Err(err(pos, "unterminated quoted term"));
                    };
                    i += 1;
                    match c {
                        '\\' => {
                            let Some(&(_, e)) = chars.get(i) else {
                                return Err(err(pos, "dangling escape"));
                            };
                            s.push(e);
                            i += 1;
                        }
                        '"' => break,
                        c => s.push(c),
                    }
                }
                toks.push((pos, Tok::Quoted(s)));
            }
            '[' => {
                let close = chars[i..].iter().position(|&(_, c)| c == ']');
                let Some(close) = close else {
                    return Err(err(pos, "unterminated field tag"));
                };
                toks.push((pos, Tok::Tag));
                i += close + 1;
            }
            _ => {
                let start = i;
                while i < chars.len() {
                    let c = chars[i].1;
                    if c.is_whitespace() || matches!(c, '(' | ')' | '"' | '[') {
                        break;
                    }
                    i += 1;
                }
                let word: String = chars[start..i].iter().map(|&(_, c)| c).collect();
                let tok = match word.as_str() {
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    _ => Tok::Word(word),
                };
                toks.push((pos, tok));
            }
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn error(&self, message: &str) -> QueryError {
        QueryError::Syntax { position: self.offset(), message: message.to_string() }
    }

    fn or_expr(&mut self) -> Result<BooleanQuery, QueryError> {
        let mut items = vec![self.and_expr()?];
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            items.push(self.and_expr()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { BooleanQuery::Or(items) })
    }

    fn and_expr(&mut self) -> Result<BooleanQuery, QueryError> {
        let mut items = vec![self.primary()?];
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            items.push(self.primary()?);
        }
        Ok(if items.len() == 1 { items.pop().unwrap() } else { BooleanQuery::And(items) })
    }

    fn primary(&mut self) -> Result<BooleanQuery, QueryError> {
        match self.peek() {
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.or_expr()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Tok::Quoted(s)) => {
                let term = s.clone();
                self.pos += 1;
                self.skip_tag();
                if term.trim().is_empty() {
                    return Err(self.error("empty quoted term"));
                }
                Ok(BooleanQuery::Term(term.trim().to_string()))
            }
            Some(Tok::Word(_)) => {
                let mut words = Vec::new();
                while let Some(Tok::Word(w)) = self.peek() {
                    words.push(w.clone());
                    self.pos += 1;
                }
                self.skip_tag();
                Ok(BooleanQuery::Term(words.join(" ")))
            }
            Some(_) => Err(self.error("expected a term or `(`")),
            None => Err(self.error("unexpected end of query")),
        }
    }

    fn skip_tag(&mut self) {
        if self.peek() == Some(&Tok::Tag) {
            self.pos += 1;
        }
    }
}

/// Parses query text. AND binds tighter than OR; parentheses override.
/// The result is in [`BooleanQuery::normalized`] form. Field tags are
/// accepted and dropped in every dialect.
pub fn parse_query(text: &str, _dialect: Dialect) -> Result<BooleanQuery, QueryError> {
    if text.trim().is_empty() {
        return Err(QueryError::Syntax { position: 0, message: "empty query".into() });
    }
    let toks = lex(text)?;
    let mut parser = Parser { toks, pos: 0, end: text.len() };
    let q = parser.or_expr()?;
    if parser.pos != parser.toks.len() {
        return Err(parser.error("unexpected token"));
    }
    Ok(q.normalized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> BooleanQuery {
        BooleanQuery::Term(s.into())
    }

    #[test]
    fn fixture_serialization_is_fully_parenthesized() {
        let q = BooleanQuery::And(vec![t("a"), BooleanQuery::Or(vec![t("b"), t("c")])]);
        assert_eq!(serialize_query(&q, Dialect::Fixture).unwrap(), "(a AND (b OR c))");
    }

    #[test]
    fn single_child_group_is_parenthesized_child() {
        let q = BooleanQuery::Or(vec![t("stroke")]);
        assert_eq!(serialize_query(&q, Dialect::Fixture).unwrap(), "(stroke)");
    }

    #[test]
    fn publication_dialect_quotes_and_tags() {
        let q = BooleanQuery::Or(vec![t("heart attack"), t("MI")]);
        assert_eq!(
            serialize_query(&q, Dialect::PublicationRegistry).unwrap(),
            "(\"heart attack\"[tiab] OR \"MI\"[tiab])"
        );
        let untagged = DialectOptions { field_tag: None };
        assert_eq!(
            serialize_query_with(&q, Dialect::PublicationRegistry, &untagged).unwrap(),
            "(\"heart attack\" OR \"MI\")"
        );
        assert_eq!(serialize_query(&q, Dialect::TrialRegistry).unwrap(), "(\"heart attack\" OR \"MI\")");
    }

    #[test]
    fn embedded_quote_round_trips() {
        let q = BooleanQuery::And(vec![t("5\" device"), t("back\\slash")]);
        for d in [Dialect::Fixture, Dialect::PublicationRegistry, Dialect::TrialRegistry] {
            let s = serialize_query(&q, d).unwrap();
            assert!(parse_query(&s, d).unwrap().structurally_eq(&q), "{d}: {s}");
        }
    }

    #[test]
    fn and_binds_tighter_than_or() {
        let q = parse_query("a AND b OR c", Dialect::Fixture).unwrap();
        assert_eq!(q, BooleanQuery::Or(vec![BooleanQuery::And(vec![t("a"), t("b")]), t("c")]));
        let q = parse_query("a AND (b OR c)", Dialect::Fixture).unwrap();
        assert_eq!(q, BooleanQuery::And(vec![t("a"), BooleanQuery::Or(vec![t("b"), t("c")])]));
    }

    #[test]
    fn nested_single_groups_normalize_to_term() {
        assert_eq!(parse_query("((a))", Dialect::Fixture).unwrap(), t("a"));
    }

    #[test]
    fn adjacent_words_form_a_phrase() {
        assert_eq!(parse_query("heart  attack OR mi", Dialect::Fixture).unwrap(),
            BooleanQuery::Or(vec![t("heart attack"), t("mi")]));
    }

    #[test]
    fn syntax_errors_report_position() {
        match parse_query("(a AND b", Dialect::Fixture) {
            Err(QueryError::Syntax { position, .. }) => assert_eq!(position, 8),
            other => panic!("{other:?}"),
        }
        match parse_query("a AND OR b", Dialect::Fixture) {
            Err(QueryError::Syntax { position, .. }) => assert_eq!(position, 6),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_query("\"open", Dialect::Fixture), Err(QueryError::Syntax { position: 0, .. })));
        assert!(parse_query("   ", Dialect::Fixture).is_err());
        assert!(parse_query("a)", Dialect::Fixture).is_err());
    }

    #[test]
    fn unknown_dialect_name() {
        assert!(matches!("sql".parse::<Dialect>(), Err(QueryError::UnsupportedDialect(_))));
        assert_eq!("fixture".parse::<Dialect>().unwrap(), Dialect::Fixture);
    }

    pub(crate) fn arb_query() -> impl Strategy<Value = BooleanQuery> {
        let term = "[a-zA-Z0-9 \"\\\\()\\[\\]_.-]{1,10}"
            .prop_filter("trimmed, non-empty", |s| !s.trim().is_empty() && s.trim() == s)
            .prop_map(BooleanQuery::Term);
        term.prop_recursive(4, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 1..4).prop_map(BooleanQuery::And),
                prop::collection::vec(inner, 1..4).prop_map(BooleanQuery::Or),
            ]
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(q in arb_query()) {
            for d in [Dialect::Fixture, Dialect::PublicationRegistry, Dialect::TrialRegistry] {
                let s = serialize_query(&q, d).unwrap();
                let back = parse_query(&s, d).unwrap();
                prop_assert!(back.structurally_eq(&q), "{} -> {:?}", s, back);
            }
        }
    }
}
