use std::collections::{BTreeSet, HashSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{InstructError, ReviewTopic};
use crate::query::{serialize_query, BooleanQuery};
use crate::registry::PublicationRegistry;
use crate::screening::Pico;
use crate::text::tokens;

pub const POOL_CAPACITY: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    SearchHit,
    PicoFill,
    /// Included study the searches missed, added so the pool holds every target.
    GroundTruthInjected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub citation_id: String,
    pub source: PoolSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub review_id: String,
    pub entries: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.citation_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn injected(&self) -> usize {
        self.entries.iter().filter(|e| e.source == PoolSource::GroundTruthInjected).count()
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "or", "of", "the", "in", "on", "for", "with", "without", "to", "by", "at", "from", "as", "vs",
    "versus", "who", "whom", "that", "which", "is", "are", "be", "been", "was", "were", "any", "all", "other", "their",
    "patients", "people", "adults", "participants", "individuals", "subjects", "not", "no", "specified", "compared",
    "than", "into", "per", "its", "it", "this", "these", "those", "such", "using", "use", "used", "based",
];

/// Content words of a PICO element, in order, without duplicates.
pub fn keywords(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokens(text)
        .into_iter()
        .filter(|t| t.len() > 1 && !STOPWORDS.contains(&t.as_str()) && !t.bytes().all(|b| b.is_ascii_digit()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Searches used to build a pool: the primary query, then fill queries run
/// in order while the pool has room.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolQueries {
    pub primary: BooleanQuery,
    pub fills: Vec<BooleanQuery>,
}

impl PoolQueries {
    /// Primary: any population keyword AND any intervention keyword. Fills:
    /// each PICO element alone (intervention, population, comparison, outcome).
    pub fn from_pico(pico: &Pico) -> Result<Self, InstructError> {
        let facet = |text: &str| -> Option<BooleanQuery> {
            let words = keywords(text);
            (!words.is_empty()).then(|| BooleanQuery::any_of(&words).expect("keywords are non-empty"))
        };
        let p = facet(&pico.population)
            .ok_or_else(|| InstructError::InvalidInput(format!("no keywords in population {:?}", pico.population)))?;
        let i = facet(&pico.intervention)
            .ok_or_else(|| InstructError::InvalidInput(format!("no keywords in intervention {:?}", pico.intervention)))?;
        let mut fills = vec![i.clone(), p.clone()];
        fills.extend(pico.comparison.as_deref().and_then(facet));
        fills.extend(pico.outcome.as_deref().and_then(facet));
        Ok(Self { primary: BooleanQuery::And(vec![p, i]), fills })
    }
}

/// Search hits first, then fill hits, all dated on or before the review;
/// included studies the searches missed are injected and tagged. Over
/// capacity, the latest non-target entries are dropped.
pub async fn build_candidate_pool(
    review: &ReviewTopic,
    queries: &PoolQueries,
    searcher: &dyn PublicationRegistry,
    capacity: usize,
) -> Result<CandidatePool, InstructError> {
    review.validate()?;
    if review.included_study_ids.len() > capacity {
        return Err(InstructError::InvalidInput(format!(
            "review {} has {} included studies, more than pool capacity {capacity}",
            review.review_id,
            review.included_study_ids.len()
        )));
    }
    let ceiling = Some(review.publication_date);
    let mut entries: Vec<PoolEntry> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    let dialect = searcher.dialect();
    let mut run = |ids: Vec<String>, source: PoolSource, entries: &mut Vec<PoolEntry>| {
        for id in ids {
            if entries.len() >= capacity {
                break;
            }
            if seen.insert(id.clone()) {
                entries.push(PoolEntry { citation_id: id, source });
            }
        }
    };
    let text = serialize_query(&queries.primary, dialect)?;
    let hits = searcher.search_publications(&text, capacity, ceiling).await?;
    run(hits, PoolSource::SearchHit, &mut entries);
    for fill in &queries.fills {
        if entries.len() >= capacity {
            break;
        }
        let text = serialize_query(fill, dialect)?;
        let hits = searcher.search_publications(&text, capacity, ceiling).await?;
        run(hits, PoolSource::PicoFill, &mut entries);
    }

    let present: HashSet<&str> = entries.iter().map(|e| e.citation_id.as_str()).collect();
    let missing: Vec<String> =
        review.included_study_ids.iter().filter(|id| !present.contains(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        let fetched = searcher.fetch_citations(&missing).await?;
        if let Some(id) = fetched.unresolved.first() {
            return Err(InstructError::InvalidInput(format!("included study {id} of {} not in registry", review.review_id)));
        }
        if let Some(late) = fetched.records.iter().find(|c| c.publication_date > review.publication_date) {
            return Err(InstructError::InvalidInput(format!(
                "included study {} ({}) postdates review {} ({})",
                late.citation_id, late.publication_date, review.review_id, review.publication_date
            )));
        }
        tracing::debug!(review = %review.review_id, injected = missing.len(), "injecting missed included studies");
    }
    let keep_others = capacity - review.included_study_ids.len();
    let mut others = 0;
    let mut pool: Vec<PoolEntry> = entries
        .into_iter()
        .filter(|e| {
            if review.included_study_ids.contains(&e.citation_id) {
                true
            } else {
                others += 1;
                others <= keep_others
            }
        })
        .collect();
    pool.extend(missing.into_iter().map(|id| PoolEntry { citation_id: id, source: PoolSource::GroundTruthInjected }));
    Ok(CandidatePool { review_id: review.review_id.clone(), entries: pool })
}

/// Checks the pool invariants against the registry's dates.
pub fn check_pool(
    pool: &CandidatePool,
    review: &ReviewTopic,
    capacity: usize,
    date_of: impl Fn(&str) -> Option<NaiveDate>,
) -> Result<(), String> {
    if pool.len() > capacity {
        return Err(format!("{} entries over capacity {capacity}", pool.len()));
    }
    let ids: BTreeSet<&str> = pool.entries.iter().map(|e| e.citation_id.as_str()).collect();
    if ids.len() != pool.len() {
        return Err("duplicate entries".into());
    }
    if let Some(missing) = review.included_study_ids.iter().find(|id| !ids.contains(id.as_str())) {
        return Err(format!("included study {missing} missing"));
    }
    for id in ids {
        match date_of(id) {
            Some(d) if d <= review.publication_date => {}
            Some(d) => return Err(format!("{id} dated {d} after review")),
            None => return Err(format!("{id} has no date")),
        }
    }
    Ok(())
}
