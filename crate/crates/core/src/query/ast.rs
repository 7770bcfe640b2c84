use serde::{Deserialize, Serialize};

use super::QueryError;

/// AND/OR tree over search terms.
///
/// Constructors enforce the invariants (non-empty trimmed terms, arity ≥ 1).
/// Single-child groups are legal and kept as built; [`BooleanQuery::normalized`]
/// collapses them when structure rather than shape matters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BooleanQuery {
    Term(String),
    And(Vec<BooleanQuery>),
    Or(Vec<BooleanQuery>),
}

impl BooleanQuery {
    pub fn term(text: impl AsRef<str>) -> Result<Self, QueryError> {
        let t = text.as_ref().trim();
        if t.is_empty() {
            return Err(QueryError::InvalidQuery("empty term".into()));
        }
        Ok(BooleanQuery::Term(t.to_string()))
    }

    pub fn and(children: Vec<BooleanQuery>) -> Result<Self, QueryError> {
        if children.is_empty() {
            return Err(QueryError::InvalidQuery("AND with no operands".into()));
        }
        Ok(BooleanQuery::And(children))
    }

    pub fn or(children: Vec<BooleanQuery>) -> Result<Self, QueryError> {
        if children.is_empty() {
            return Err(QueryError::InvalidQuery("OR with no operands".into()));
        }
        Ok(BooleanQuery::Or(children))
    }

    /// Conjunction of plain terms.
    pub fn all_of<S: AsRef<str>>(terms: &[S]) -> Result<Self, QueryError> {
        Self::and(terms.iter().map(Self::term).collect::<Result<_, _>>()?)
    }

    /// Disjunction of plain terms.
    pub fn any_of<S: AsRef<str>>(terms: &[S]) -> Result<Self, QueryError> {
        Self::or(terms.iter().map(Self::term).collect::<Result<_, _>>()?)
    }

    /// Checks invariants on a tree built without the constructors
    /// (deserialized, for instance).
    pub fn validate(&self) -> Result<(), QueryError> {
        match self {
            BooleanQuery::Term(t) => {
                if t.is_empty() || t.trim() != t {
                    return Err(QueryError::InvalidQuery(format!("term {t:?} is empty or untrimmed")));
                }
                Ok(())
            }
            BooleanQuery::And(c) | BooleanQuery::Or(c) => {
                if c.is_empty() {
                    return Err(QueryError::InvalidQuery("group with no operands".into()));
                }
                c.iter().try_for_each(BooleanQuery::validate)
            }
        }
    }

    pub fn children(&self) -> &[BooleanQuery] {
        match self {
            BooleanQuery::Term(_) => &[],
            BooleanQuery::And(c) | BooleanQuery::Or(c) => c,
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(BooleanQuery::depth).max().unwrap_or(0)
    }

    /// All term texts, left to right.
    pub fn terms(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_terms(&mut out);
        out
    }

    fn collect_terms<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            BooleanQuery::Term(t) => out.push(t),
            BooleanQuery::And(c) | BooleanQuery::Or(c) => c.iter().for_each(|q| q.collect_terms(out)),
        }
    }

    /// Collapses single-child groups and flattens nested groups of the same
    /// operator. Semantics are unchanged.
    pub fn normalized(&self) -> BooleanQuery {
        match self {
            BooleanQuery::Term(t) => BooleanQuery::Term(t.clone()),
            BooleanQuery::And(c) => Self::flatten(c, true),
            BooleanQuery::Or(c) => Self::flatten(c, false),
        }
    }

    fn flatten(children: &[BooleanQuery], is_and: bool) -> BooleanQuery {
        let mut flat = Vec::new();
        for child in children.iter().map(BooleanQuery::normalized) {
            match child {
                BooleanQuery::And(inner) if is_and => flat.extend(inner),
                BooleanQuery::Or(inner) if !is_and => flat.extend(inner),
                other => flat.push(other),
            }
        }
        if flat.len() == 1 {
            return flat.pop().unwrap();
        }
        if is_and {
            BooleanQuery::And(flat)
        } else {
            BooleanQuery::Or(flat)
        }
    }

    /// Equality up to [`normalized`](Self::normalized) form.
    pub fn structurally_eq(&self, other: &BooleanQuery) -> bool {
        self.normalized() == other.normalized()
    }

    /// Evaluates the tree given a per-term predicate.
    pub fn evaluate(&self, matches: &mut impl FnMut(&str) -> bool) -> bool {
        match self {
            BooleanQuery::Term(t) => matches(t),
            BooleanQuery::And(c) => c.iter().all(|q| q.evaluate(matches)),
            BooleanQuery::Or(c) => c.iter().any(|q| q.evaluate(matches)),
        }
    }

    /// Whether a document with the given token set satisfies the query.
    /// A term matches when every one of its tokens occurs in the document.
    pub fn matches_tokens(&self, doc_tokens: &std::collections::HashSet<String>) -> bool {
        self.evaluate(&mut |term| {
            let toks = crate::text::tokens(term);
            !toks.is_empty() && toks.iter().all(|t| doc_tokens.contains(t))
        })
    }
}
