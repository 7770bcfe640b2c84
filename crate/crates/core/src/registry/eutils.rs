use std::time::Duration;

use async_trait::async_trait;
use chrono::NaiveDate;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use super::{check_limit, FetchedCitations, PublicationCitation, PublicationRegistry, RateLimiter, RegistryError};
use crate::query::Dialect;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EutilsConfig {
    pub base_url: String,
    pub database: String,
    /// Environment variable holding an optional API key.
    pub api_key_env: String,
    pub requests_per_second: f64,
    pub page_size: usize,
    pub fetch_batch: usize,
    pub timeout_secs: u64,
}

impl Default for EutilsConfig {
    fn default() -> Self {
        Self {
            base_url: "https://eutils.ncbi.nlm.nih.gov/entrez/eutils".into(),
            database: "pubmed".into(),
            api_key_env: "NCBI_API_KEY".into(),
            requests_per_second: 3.0,
            page_size: 500,
            fetch_batch: 200,
            timeout_secs: 60,
        }
    }
}

/// Live publication registry over the E-utilities search/fetch endpoints.
pub struct EutilsClient {
    config: EutilsConfig,
    http: reqwest::Client,
    limiter: RateLimiter,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct EsearchEnvelope {
    esearchresult: EsearchResult,
}

#[derive(Deserialize)]
struct EsearchResult {
    #[serde(default)]
    count: Option<String>,
    #[serde(default)]
    idlist: Vec<String>,
    #[serde(default, rename = "ERROR")]
    error: Option<String>,
}

impl EutilsClient {
    pub fn new(config: EutilsConfig) -> Result<Self, RegistryError> {
        if config.page_size == 0 || config.fetch_batch == 0 {
            return Err(RegistryError::InvalidArgument("page_size and fetch_batch must be positive".into()));
        }
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let limiter = RateLimiter::new(config.requests_per_second);
        Ok(Self { config, http, limiter, api_key })
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{endpoint}", self.config.base_url.trim_end_matches('/'))
    }

    async fn get(&self, endpoint: &str, params: &[(&str, String)]) -> Result<String, RegistryError> {
        self.limiter.acquire().await;
        let mut req = self.http.get(self.url(endpoint)).query(params);
        if let Some(key) = &self.api_key {
            req = req.query(&[("api_key", key)]);
        }
        let resp = req.send().await.map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(RegistryError::Unavailable(format!("{endpoint}: HTTP {status}")));
        }
        if !status.is_success() {
            return Err(RegistryError::QueryRejected(format!("{endpoint}: HTTP {status}: {body}")));
        }
        Ok(body)
    }
}

#[async_trait]
impl PublicationRegistry for EutilsClient {
    fn dialect(&self) -> Dialect {
        Dialect::PublicationRegistry
    }

    async fn search_publications(
        &self,
        query: &str,
        limit: usize,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<Vec<String>, RegistryError> {
        check_limit(limit)?;
        let mut ids: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut start = 0usize;
        loop {
            let page = self.config.page_size.min(limit - ids.len());
            let mut params = vec![
                ("db", self.config.database.clone()),
                ("term", query.to_string()),
                ("retmode", "json".to_string()),
                ("retstart", start.to_string()),
                ("retmax", page.to_string()),
            ];
            if let Some(c) = date_ceiling {
                params.push(("datetype", "pdat".into()));
                params.push(("mindate", "1800/01/01".into()));
                params.push(("maxdate", c.format("%Y/%m/%d").to_string()));
            }
            let body = self.get("esearch.fcgi", &params).await?;
            let env: EsearchEnvelope =
                serde_json::from_str(&body).map_err(|e| RegistryError::Malformed(format!("esearch: {e}")))?;
            if let Some(err) = env.esearchresult.error {
                return Err(RegistryError::QueryRejected(err));
            }
            let total: usize = env.esearchresult.count.as_deref().and_then(|c| c.parse().ok()).unwrap_or(0);
            let got = env.esearchresult.idlist.len();
            for id in env.esearchresult.idlist {
                if ids.len() < limit && seen.insert(id.clone()) {
                    ids.push(id);
                }
            }
            start += got;
            if got == 0 || ids.len() >= limit || start >= total {
                break;
            }
        }
        Ok(ids)
    }

    async fn fetch_citations(&self, ids: &[String]) -> Result<FetchedCitations, RegistryError> {
        if ids.is_empty() {
            return Err(RegistryError::InvalidArgument("no ids to fetch".into()));
        }
        let mut unique: Vec<&String> = Vec::new();
        for id in ids {
            if !unique.contains(&id) {
                unique.push(id);
            }
        }
        let mut found = std::collections::HashMap::new();
        for chunk in unique.chunks(self.config.fetch_batch) {
            let joined = chunk.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",");
            let params = [
                ("db", self.config.database.clone()),
                ("id", joined),
                ("retmode", "xml".to_string()),
            ];
            let body = self.get("efetch.fcgi", &params).await?;
            for record in parse_pubmed_xml(&body)? {
                found.insert(record.citation_id.clone(), record);
            }
        }
        let mut out = FetchedCitations::default();
        for id in ids {
            match found.get(id) {
                Some(r) => out.records.push(r.clone()),
                None => out.unresolved.push(id.clone()),
            }
        }
        Ok(out)
    }
}

#[derive(Default)]
struct ArticleDraft {
    pmid: Option<String>,
    title: String,
    abstract_parts: Vec<String>,
    year: Option<i32>,
    month: Option<u32>,
    day: Option<u32>,
    medline_date: Option<String>,
    databank_name: String,
    nct_ids: Vec<String>,
}

fn month_number(text: &str) -> Option<u32> {
    if let Ok(n) = text.trim().parse::<u32>() {
        return (1..=12).contains(&n).then_some(n);
    }
    const NAMES: [&str; 12] = ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"];
    let lower = text.trim().to_ascii_lowercase();
    NAMES.iter().position(|m| lower.starts_with(m)).map(|i| i as u32 + 1)
}

impl ArticleDraft {
    fn finish(self) -> Result<PublicationCitation, RegistryError> {
        let pmid = self.pmid.ok_or_else(|| RegistryError::Malformed("article without PMID".into()))?;
        let (year, month, day) = match (self.year, &self.medline_date) {
            (Some(y), _) => (y, self.month.unwrap_or(1), self.day.unwrap_or(1)),
            (None, Some(md)) => {
                let mut parts = md.split_whitespace();
                let y = parts.next().and_then(|y| y.get(..4)).and_then(|y| y.parse().ok());
                let m = parts.next().and_then(month_number);
                match y {
                    Some(y) => (y, m.unwrap_or(1), 1),
                    None => return Err(RegistryError::Malformed(format!("{pmid}: unparseable date {md:?}"))),
                }
            }
            (None, None) => return Err(RegistryError::Malformed(format!("{pmid}: no publication date"))),
        };
        let date = NaiveDate::from_ymd_opt(year, month, day)
            .ok_or_else(|| RegistryError::Malformed(format!("{pmid}: invalid date {year}-{month}-{day}")))?;
        let linked = self.nct_ids.into_iter().find(|id| super::is_trial_id(id));
        Ok(PublicationCitation {
            citation_id: pmid,
            title: self.title.trim().to_string(),
            abstract_text: self.abstract_parts.join("\n"),
            publication_date: date,
            linked_trial_id: linked,
            full_text: None,
            table_text: None,
        })
    }
}

/// Parses an efetch `PubmedArticleSet` document.
pub(crate) fn parse_pubmed_xml(xml: &str) -> Result<Vec<PublicationCitation>, RegistryError> {
    let mut reader = Reader::from_str(xml);
    let mut path: Vec<String> = Vec::new();
    let mut current: Option<ArticleDraft> = None;
    let mut out = Vec::new();
    loop {
        let event = reader.read_event().map_err(|e| RegistryError::Malformed(format!("efetch xml: {e}")))?;
        match event {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if name == "PubmedArticle" {
                    current = Some(ArticleDraft::default());
                }
                if name == "AbstractText" {
                    let label = e
                        .attributes()
                        .flatten()
                        .find(|a| a.key.as_ref() == b"Label")
                        .map(|a| format!("{}: ", String::from_utf8_lossy(&a.value)));
                    if let Some(a) = current.as_mut() {
                        a.abstract_parts.push(label.unwrap_or_default());
                    }
                }
                path.push(name);
            }
            Event::End(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                path.pop();
                if name == "PubmedArticle" {
                    if let Some(draft) = current.take() {
                        out.push(draft.finish()?);
                    }
                }
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(|e| RegistryError::Malformed(format!("efetch xml: {e}")))?;
                append_text(&path, current.as_mut(), &text);
            }
            Event::CData(t) => {
                let text = String::from_utf8_lossy(&t).into_owned();
                append_text(&path, current.as_mut(), &text);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(out)
}

fn append_text(path: &[String], current: Option<&mut ArticleDraft>, text: &str) {
    let Some(a) = current else { return };
    let has = |name: &str| path.iter().any(|p| p == name);
    let leaf = path.last().map(String::as_str).unwrap_or("");
    if has("CommentsCorrectionsList") || has("ReferenceList") {
        return;
    }
    if has("ArticleTitle") {
        a.title.push_str(text);
    } else if has("AbstractText") {
        if let Some(last) = a.abstract_parts.last_mut() {
            last.push_str(text);
        }
    } else if leaf == "PMID" && a.pmid.is_none() && has("MedlineCitation") {
        a.pmid = Some(text.trim().to_string());
    } else if has("PubDate") {
        match leaf {
            "Year" => a.year = text.trim().parse().ok(),
            "Month" => a.month = month_number(text),
            "Day" => a.day = text.trim().parse().ok(),
            "MedlineDate" => a.medline_date = Some(text.trim().to_string()),
            _ => {}
        }
    } else if leaf == "DataBankName" {
        a.databank_name = text.trim().to_string();
    } else if leaf == "AccessionNumber" && a.databank_name.eq_ignore_ascii_case("ClinicalTrials.gov") {
        a.nct_ids.push(text.trim().to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::extract::Query;
    use axum::routing::get;
    use axum::{Json, Router};
    use std::collections::HashMap;

    const EFETCH: &str = r#"<?xml version="1.0"?>
<PubmedArticleSet>
 <PubmedArticle>
  <MedlineCitation>
   <PMID Version="1">111</PMID>
   <Article>
    <Journal><JournalIssue><PubDate><Year>2019</Year><Month>Mar</Month><Day>05</Day></PubDate></JournalIssue></Journal>
    <ArticleTitle>Aspirin &amp; stroke</ArticleTitle>
    <Abstract>
     <AbstractText Label="BACKGROUND">Stroke is common.</AbstractText>
     <AbstractText Label="METHODS">We randomised 200 patients.</AbstractText>
    </Abstract>
    <DataBankList><DataBank><DataBankName>ClinicalTrials.gov</DataBankName>
     <AccessionNumberList><AccessionNumber>NCT01234567</AccessionNumber></AccessionNumberList></DataBank></DataBankList>
   </Article>
  </MedlineCitation>
 </PubmedArticle>
 <PubmedArticle>
  <MedlineCitation>
   <PMID Version="1">222</PMID>
   <Article>
    <Journal><JournalIssue><PubDate><MedlineDate>2018 Nov-Dec</MedlineDate></PubDate></JournalIssue></Journal>
    <ArticleTitle>Statins</ArticleTitle>
   </Article>
  </MedlineCitation>
 </PubmedArticle>
</PubmedArticleSet>"#;

    #[test]
    fn parses_efetch_articles() {
        let recs = parse_pubmed_xml(EFETCH).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].citation_id, "111");
        assert_eq!(recs[0].title, "Aspirin & stroke");
        assert_eq!(recs[0].abstract_text, "BACKGROUND: Stroke is common.\nMETHODS: We randomised 200 patients.");
        assert_eq!(recs[0].publication_date, NaiveDate::from_ymd_opt(2019, 3, 5).unwrap());
        assert_eq!(recs[0].linked_trial_id.as_deref(), Some("NCT01234567"));
        assert_eq!(recs[1].publication_date, NaiveDate::from_ymd_opt(2018, 11, 1).unwrap());
        assert_eq!(recs[1].abstract_text, "");
    }

    async fn serve() -> String {
        let all: Vec<String> = (1..=7).map(|i| i.to_string()).collect();
        let app = Router::new()
            .route(
                "/esearch.fcgi",
                get(move |Query(q): Query<HashMap<String, String>>| {
                    let all = all.clone();
                    async move {
                        if q.get("term").map(String::as_str) == Some("((bad") {
                            return Json(serde_json::json!({"esearchresult": {"ERROR": "Invalid query"}}));
                        }
                        let start: usize = q["retstart"].parse().unwrap();
                        let max: usize = q["retmax"].parse().unwrap();
                        let ids: Vec<_> = all.iter().skip(start).take(max).cloned().collect();
                        Json(serde_json::json!({"esearchresult": {"count": all.len().to_string(), "idlist": ids}}))
                    }
                }),
            )
            .route("/efetch.fcgi", get(|| async { EFETCH }));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        format!("http://{addr}")
    }

    fn client(base: String) -> EutilsClient {
        EutilsClient::new(EutilsConfig {
            base_url: base,
            page_size: 3,
            requests_per_second: 1000.0,
            api_key_env: "LITMINE_TEST_NO_KEY".into(),
            ..Default::default()
        })
        .unwrap()
    }

    #[tokio::test]
    async fn search_pages_until_limit() {
        let c = client(serve().await);
        assert_eq!(c.search_publications("x", 5, None).await.unwrap(), vec!["1", "2", "3", "4", "5"]);
        assert_eq!(c.search_publications("x", 100, None).await.unwrap().len(), 7);
        assert!(matches!(c.search_publications("((bad", 5, None).await, Err(RegistryError::QueryRejected(_))));
    }

    #[tokio::test]
    async fn fetch_reports_unresolved() {
        let c = client(serve().await);
        let ids: Vec<String> = ["222", "999", "111"].iter().map(|s| s.to_string()).collect();
        let got = c.fetch_citations(&ids).await.unwrap();
        assert_eq!(got.records.iter().map(|r| r.citation_id.as_str()).collect::<Vec<_>>(), vec!["222", "111"]);
        assert_eq!(got.unresolved, vec!["999"]);
    }

    #[tokio::test]
    async fn unreachable_is_unavailable() {
        let c = client("http://127.0.0.1:9".into());
        assert!(matches!(c.search_publications("x", 5, None).await, Err(RegistryError::Unavailable(_))));
    }
}
