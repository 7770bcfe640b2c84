//! Publication and trial registry clients.
//!
//! [`FixtureStore`] serves both registries offline from a directory of JSON
//! records; [`EutilsClient`] and [`CtGovClient`] talk to the live services.

mod ctgov;
mod eutils;
mod fixture;
mod ratelimit;

use std::sync::LazyLock;

use async_trait::async_trait;
use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{Arm, OutcomeResult, ParticipantMeasure};
use crate::query::{serialize_query, BooleanQuery, Dialect};

pub use ctgov::{CtGovClient, CtGovConfig};
pub use eutils::{EutilsClient, EutilsConfig};
pub use fixture::{publication_token_sets, FixtureStore};
pub use ratelimit::RateLimiter;

/// Result cap used when evaluating search queries.
pub const SEARCH_EVAL_LIMIT: usize = 3000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("registry unavailable: {0}")]
    Unavailable(String),
    #[error("query rejected by registry: {0}")]
    QueryRejected(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("malformed registry data: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationCitation {
    pub citation_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    pub publication_date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linked_trial_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_text: Option<String>,
}

impl PublicationCitation {
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.citation_id.trim().is_empty() {
            return Err(RegistryError::Malformed("citation without id".into()));
        }
        if self.title.trim().is_empty() {
            return Err(RegistryError::Malformed(format!("citation {} has no title", self.citation_id)));
        }
        Ok(())
    }

    /// Title and abstract, the text that screening and search look at.
    pub fn searchable_text(&self) -> String {
        format!("{}\n{}", self.title, self.abstract_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub conditions: Vec<String>,
    #[serde(default)]
    pub interventions: Vec<String>,
    #[serde(default)]
    pub enrollment: u64,
    #[serde(default)]
    pub study_type: String,
    /// First-posted date, used for date ceilings.
    pub first_posted: NaiveDate,
    #[serde(default)]
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub participant_flow: Vec<ParticipantMeasure>,
    #[serde(default)]
    pub reported_results: Vec<OutcomeResult>,
    #[serde(default)]
    pub has_results: bool,
}

impl TrialRecord {
    pub fn validate(&self) -> Result<(), RegistryError> {
        check_trial_id(&self.trial_id)?;
        if self.has_results != !self.reported_results.is_empty() {
            return Err(RegistryError::Malformed(format!(
                "{}: has_results={} but {} reported results",
                self.trial_id,
                self.has_results,
                self.reported_results.len()
            )));
        }
        Ok(())
    }

    pub fn searchable_text(&self) -> String {
        format!("{}\n{}\n{}", self.title, self.conditions.join("\n"), self.interventions.join("\n"))
    }
}

static NCT_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^NCT\d{8}$").unwrap());
static NCT_TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bNCT\d{8}\b").unwrap());

pub fn is_trial_id(id: &str) -> bool {
    NCT_ID.is_match(id)
}

pub fn check_trial_id(id: &str) -> Result<(), RegistryError> {
    if is_trial_id(id) {
        Ok(())
    } else {
        Err(RegistryError::InvalidArgument(format!("{id:?} is not an NCT identifier")))
    }
}

/// One page of search hits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchPage {
    pub ids: Vec<String>,
    pub total_available: usize,
    pub page_token: Option<String>,
}

/// Citations resolved by a fetch, plus the ids that could not be resolved.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FetchedCitations {
    pub records: Vec<PublicationCitation>,
    pub unresolved: Vec<String>,
}

#[async_trait]
pub trait PublicationRegistry: Send + Sync {
    fn dialect(&self) -> Dialect;

    /// At most `limit` distinct ids in registry rank order. `query` must be
    /// in this registry's dialect.
    async fn search_publications(
        &self,
        query: &str,
        limit: usize,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<Vec<String>, RegistryError>;

    /// One record per resolvable id, in input order (duplicates kept).
    async fn fetch_citations(&self, ids: &[String]) -> Result<FetchedCitations, RegistryError>;
}

#[async_trait]
pub trait TrialRegistry: Send + Sync {
    fn dialect(&self) -> Dialect;

    async fn search_trials(
        &self,
        query: &str,
        limit: usize,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<Vec<String>, RegistryError>;

    async fn fetch_trial(&self, trial_id: &str) -> Result<TrialRecord, RegistryError>;
}

/// Serializes `query` in the registry's dialect and runs it.
pub async fn search_publications_with(
    registry: &dyn PublicationRegistry,
    query: &BooleanQuery,
    limit: usize,
    date_ceiling: Option<NaiveDate>,
) -> Result<Vec<String>, RegistryError> {
    let text = serialize_query(query, registry.dialect())
        .map_err(|e| RegistryError::InvalidArgument(e.to_string()))?;
    registry.search_publications(&text, limit, date_ceiling).await
}

pub async fn search_trials_with(
    registry: &dyn TrialRegistry,
    query: &BooleanQuery,
    limit: usize,
    date_ceiling: Option<NaiveDate>,
) -> Result<Vec<String>, RegistryError> {
    let text = serialize_query(query, registry.dialect())
        .map_err(|e| RegistryError::InvalidArgument(e.to_string()))?;
    registry.search_trials(&text, limit, date_ceiling).await
}

pub(crate) fn check_limit(limit: usize) -> Result<(), RegistryError> {
    if limit == 0 {
        return Err(RegistryError::InvalidArgument("limit must be at least 1".into()));
    }
    Ok(())
}

/// Where a citation's trial link came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSource {
    Metadata,
    AbstractText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialLink {
    pub trial_id: String,
    pub source: LinkSource,
    /// An NCT id found in the abstract that disagrees with the metadata link.
    pub conflicting_id: Option<String>,
}

/// Resolves a citation's trial link with provenance. Metadata wins over ids
/// found in the abstract; a disagreement is logged and reported.
pub fn link_citation_to_trial_detailed(citation: &PublicationCitation) -> Option<TrialLink> {
    let scanned: Vec<&str> = NCT_TOKEN.find_iter(&citation.abstract_text).map(|m| m.as_str()).collect();
    let declared = citation.linked_trial_id.as_deref().map(str::trim).filter(|id| is_trial_id(id));
    match declared {
        Some(id) => {
            let conflicting = scanned.iter().find(|s| **s != id).map(|s| s.to_string());
            if let Some(other) = &conflicting {
                tracing::warn!(
                    citation = %citation.citation_id,
                    metadata = id,
                    abstract_id = %other,
                    "trial link in metadata disagrees with abstract; keeping metadata"
                );
            }
            Some(TrialLink { trial_id: id.to_string(), source: LinkSource::Metadata, conflicting_id: conflicting })
        }
        None => scanned.first().map(|id| TrialLink {
            trial_id: id.to_string(),
            source: LinkSource::AbstractText,
            conflicting_id: None,
        }),
    }
}

pub fn link_citation_to_trial(citation: &PublicationCitation) -> Option<String> {
    link_citation_to_trial_detailed(citation).map(|l| l.trial_id)
}
