use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use async_trait::async_trait;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{
    check_limit, check_trial_id, FetchedCitations, PublicationCitation, PublicationRegistry, RegistryError,
    SearchPage, TrialRecord, TrialRegistry,
};
use crate::query::{parse_query, BooleanQuery, Dialect};
use crate::text::tokens;

type Postings = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct IndexFile {
    publications: Postings,
    trials: Postings,
}

/// Offline registry over JSON fixtures.
///
/// Layout: `publications/*.json`, `trials/*.json` (each file one record or
/// an array of records) and an optional `index.json` mapping each token to
/// the ids containing it. Without `index.json` the index is built on load.
///
/// A term matches a record when every token of the term occurs in the
/// record's title/abstract (publications) or title/conditions/interventions
/// (trials). Hits are ranked newest first, ties by ascending id.
#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    publications: BTreeMap<String, PublicationCitation>,
    trials: BTreeMap<String, TrialRecord>,
    index: IndexFile,
}

fn build_postings<'a>(docs: impl Iterator<Item = (&'a String, String)>) -> Postings {
    let mut postings = Postings::new();
    for (id, text) in docs {
        for tok in tokens(&text) {
            postings.entry(tok).or_default().insert(id.clone());
        }
    }
    postings
}

fn read_records<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<Vec<T>, RegistryError> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| RegistryError::Unavailable(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    paths.sort();
    for path in paths {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| RegistryError::Unavailable(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| RegistryError::Malformed(format!("{}: {e}", path.display())))?;
        let items = match value {
            serde_json::Value::Array(items) => items,
            single => vec![single],
        };
        for item in items {
            out.push(serde_json::from_value(item).map_err(|e| RegistryError::Malformed(format!("{}: {e}", path.display())))?);
        }
    }
    Ok(out)
}

impl FixtureStore {
    pub fn new(
        publications: impl IntoIterator<Item = PublicationCitation>,
        trials: impl IntoIterator<Item = TrialRecord>,
    ) -> Result<Self, RegistryError> {
        let mut store = FixtureStore::default();
        for p in publications {
            p.validate()?;
            let id = p.citation_id.clone();
            if store.publications.insert(id.clone(), p).is_some() {
                return Err(RegistryError::Malformed(format!("duplicate citation id {id}")));
            }
        }
        for t in trials {
            t.validate()?;
            let id = t.trial_id.clone();
            if store.trials.insert(id.clone(), t).is_some() {
                return Err(RegistryError::Malformed(format!("duplicate trial id {id}")));
            }
        }
        store.reindex();
        Ok(store)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let dir = dir.as_ref();
        let pubs: Vec<PublicationCitation> = read_records(&dir.join("publications"))?;
        let trials: Vec<TrialRecord> = read_records(&dir.join("trials"))?;
        let mut store = Self::new(pubs, trials)?;
        let index_path = dir.join("index.json");
        if index_path.exists() {
            let text = std::fs::read_to_string(&index_path)
                .map_err(|e| RegistryError::Unavailable(format!("{}: {e}", index_path.display())))?;
            store.index = serde_json::from_str(&text)
                .map_err(|e| RegistryError::Malformed(format!("{}: {e}", index_path.display())))?;
        }
        Ok(store)
    }

    /// Writes records one per file plus `index.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("publications"))?;
        std::fs::create_dir_all(dir.join("trials"))?;
        for (id, p) in &self.publications {
            std::fs::write(dir.join("publications").join(format!("{id}.json")), serde_json::to_string_pretty(p)?)?;
        }
        for (id, t) in &self.trials {
            std::fs::write(dir.join("trials").join(format!("{id}.json")), serde_json::to_string_pretty(t)?)?;
        }
        std::fs::write(dir.join("index.json"), serde_json::to_string(&self.index)?)?;
        Ok(())
    }

    fn reindex(&mut self) {
        self.index.publications =
            build_postings(self.publications.iter().map(|(id, p)| (id, p.searchable_text())));
        self.index.trials = build_postings(self.trials.iter().map(|(id, t)| (id, t.searchable_text())));
    }

    pub fn publication(&self, id: &str) -> Option<&PublicationCitation> {
        self.publications.get(id)
    }

    pub fn publications(&self) -> impl Iterator<Item = &PublicationCitation> {
        self.publications.values()
    }

    pub fn trial(&self, id: &str) -> Option<&TrialRecord> {
        self.trials.get(id)
    }

    pub fn trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.values()
    }

    fn evaluate(postings: &Postings, q: &BooleanQuery) -> BTreeSet<String> {
        match q {
            BooleanQuery::Term(t) => {
                let toks = tokens(t);
                let mut lists = toks.iter().map(|tok| postings.get(tok));
                let Some(Some(first)) = lists.next() else {
                    return BTreeSet::new();
                };
                let mut acc = first.clone();
                for list in lists {
                    match list {
                        Some(l) => acc.retain(|id| l.contains(id)),
                        None => return BTreeSet::new(),
                    }
                }
                acc
            }
            BooleanQuery::And(children) => {
                let mut iter = children.iter();
                let mut acc = Self::evaluate(postings, iter.next().expect("validated arity"));
                for child in iter {
                    if acc.is_empty() {
                        break;
                    }
                    let next = Self::evaluate(postings, child);
                    acc.retain(|id| next.contains(id));
                }
                acc
            }
            BooleanQuery::Or(children) => {
                children.iter().flat_map(|c| Self::evaluate(postings, c)).collect()
            }
        }
    }

    fn parse(query: &str) -> Result<BooleanQuery, RegistryError> {
        parse_query(query, Dialect::Fixture).map_err(|e| RegistryError::QueryRejected(e.to_string()))
    }

    fn ranked_publications(&self, query: &str, date_ceiling: Option<NaiveDate>) -> Result<Vec<String>, RegistryError> {
        let q = Self::parse(query)?;
        let mut hits: Vec<&PublicationCitation> = Self::evaluate(&self.index.publications, &q)
            .iter()
            .filter_map(|id| self.publications.get(id))
            .filter(|p| date_ceiling.is_none_or(|c| p.publication_date <= c))
            .collect();
        hits.sort_by(|a, b| b.publication_date.cmp(&a.publication_date).then_with(|| a.citation_id.cmp(&b.citation_id)));
        Ok(hits.into_iter().map(|p| p.citation_id.clone()).collect())
    }

    /// Paged form of publication search; the page token is an offset.
    pub fn search_publications_page(
        &self,
        query: &str,
        page_size: usize,
        page_token: Option<&str>,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<SearchPage, RegistryError> {
        check_limit(page_size)?;
        let offset: usize = match page_token {
            Some(t) => t.parse().map_err(|_| RegistryError::InvalidArgument(format!("bad page token {t:?}")))?,
            None => 0,
        };
        let all = self.ranked_publications(query, date_ceiling)?;
        let end = (offset + page_size).min(all.len());
        let ids = all.get(offset..end).unwrap_or_default().to_vec();
        let page_token = (end < all.len()).then(|| end.to_string());
        Ok(SearchPage { ids, total_available: all.len(), page_token })
    }
}

#[async_trait]
impl PublicationRegistry for FixtureStore {
    fn dialect(&self) -> Dialect {
        Dialect::Fixture
    }

    async fn search_publications(
        &self,
        query: &str,
        limit: usize,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<Vec<String>, RegistryError> {
        check_limit(limit)?;
        let mut ids = self.ranked_publications(query, date_ceiling)?;
        ids.truncate(limit);
        Ok(ids)
    }

    async fn fetch_citations(&self, ids: &[String]) -> Result<FetchedCitations, RegistryError> {
        if ids.is_empty() {
            return Err(RegistryError::InvalidArgument("no ids to fetch".into()));
        }
        let mut out = FetchedCitations::default();
        for id in ids {
            match self.publications.get(id) {
                Some(p) => out.records.push(p.clone()),
                None => out.unresolved.push(id.clone()),
            }
        }
        Ok(out)
    }
}

#[async_trait]
impl TrialRegistry for FixtureStore {
    fn dialect(&self) -> Dialect {
        Dialect::Fixture
    }

    async fn search_trials(
        &self,
        query: &str,
        limit: usize,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<Vec<String>, RegistryError> {
        check_limit(limit)?;
        let q = Self::parse(query)?;
        let mut hits: Vec<&TrialRecord> = Self::evaluate(&self.index.trials, &q)
            .iter()
            .filter_map(|id| self.trials.get(id))
            .filter(|t| date_ceiling.is_none_or(|c| t.first_posted <= c))
            .collect();
        hits.sort_by(|a, b| b.first_posted.cmp(&a.first_posted).then_with(|| a.trial_id.cmp(&b.trial_id)));
        Ok(hits.into_iter().take(limit).map(|t| t.trial_id.clone()).collect())
    }

    async fn fetch_trial(&self, trial_id: &str) -> Result<TrialRecord, RegistryError> {
        check_trial_id(trial_id)?;
        self.trials.get(trial_id).cloned().ok_or_else(|| RegistryError::NotFound(trial_id.to_string()))
    }
}

/// Token sets per publication, for evaluating queries document by document.
pub fn publication_token_sets(store: &FixtureStore) -> HashMap<String, std::collections::HashSet<String>> {
    store
        .publications()
        .map(|p| (p.citation_id.clone(), tokens(&p.searchable_text()).into_iter().collect()))
        .collect()
}
