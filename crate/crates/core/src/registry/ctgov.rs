use std::time::Duration;

use async_trait::async_trait;
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_limit, check_trial_id, RateLimiter, RegistryError, TrialRecord, TrialRegistry};
use crate::extraction::{Arm, FieldValue, MeasureGroup, MeasureResult, OutcomeResult, OutcomeValue, ParticipantMeasure};
use crate::query::Dialect;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CtGovConfig {
    pub base_url: String,
    pub requests_per_second: f64,
    pub page_size: usize,
    pub timeout_secs: u64,
}

impl Default for CtGovConfig {
    fn default() -> Self {
        Self {
            base_url: "https://clinicaltrials.gov/api/v2".into(),
            requests_per_second: 3.0,
            page_size: 1000,
            timeout_secs: 60,
        }
    }
}

/// Live trial registry over the v2 JSON studies API.
pub struct CtGovClient {
    config: CtGovConfig,
    http: reqwest::Client,
    limiter: RateLimiter,
}

impl CtGovClient {
    pub fn new(config: CtGovConfig) -> Result<Self, RegistryError> {
        if config.page_size == 0 {
            return Err(RegistryError::InvalidArgument("page_size must be positive".into()));
        }
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        let limiter = RateLimiter::new(config.requests_per_second);
        Ok(Self { config, http, limiter })
    }

    async fn get_json(&self, path: &str, params: &[(&str, String)]) -> Result<Value, RegistryError> {
        self.limiter.acquire().await;
        let url = format!("{}/{path}", self.config.base_url.trim_end_matches('/'));
        let resp = self
            .http
            .get(url)
            .query(params)
            .send()
            .await
            .map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().await.map_err(|e| RegistryError::Unavailable(e.to_string()))?;
        match status.as_u16() {
            200..=299 => serde_json::from_str(&body).map_err(|e| RegistryError::Malformed(format!("{path}: {e}"))),
            404 => Err(RegistryError::NotFound(path.to_string())),
            429 | 500..=599 => Err(RegistryError::Unavailable(format!("{path}: HTTP {status}"))),
            _ => Err(RegistryError::QueryRejected(format!("{path}: HTTP {status}: {body}"))),
        }
    }
}

#[async_trait]
impl TrialRegistry for CtGovClient {
    fn dialect(&self) -> Dialect {
        Dialect::TrialRegistry
    }

    /// Date ceilings are applied client-side against the first-posted date.
    async fn search_trials(
        &self,
        query: &str,
        limit: usize,
        date_ceiling: Option<NaiveDate>,
    ) -> Result<Vec<String>, RegistryError> {
        check_limit(limit)?;
        let mut ids = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut token: Option<String> = None;
        loop {
            let mut params = vec![
                ("query.term", query.to_string()),
                ("pageSize", self.config.page_size.to_string()),
                ("fields", "NCTId,StudyFirstPostDate".to_string()),
            ];
            if let Some(t) = &token {
                params.push(("pageToken", t.clone()));
            }
            let page = self.get_json("studies", &params).await?;
            let studies = page.get("studies").and_then(Value::as_array).cloned().unwrap_or_default();
            for study in &studies {
                let id = str_at(study, &["protocolSection", "identificationModule", "nctId"]);
                if id.is_empty() {
                    continue;
                }
                if let Some(c) = date_ceiling {
                    match posted_date(study) {
                        Some(d) if d <= c => {}
                        _ => continue,
                    }
                }
                if seen.insert(id.clone()) {
                    ids.push(id);
                    if ids.len() >= limit {
                        return Ok(ids);
                    }
                }
            }
            token = page.get("nextPageToken").and_then(Value::as_str).map(str::to_string);
            if token.is_none() || studies.is_empty() {
                return Ok(ids);
            }
        }
    }

    async fn fetch_trial(&self, trial_id: &str) -> Result<TrialRecord, RegistryError> {
        check_trial_id(trial_id)?;
        let study = self.get_json(&format!("studies/{trial_id}"), &[]).await.map_err(|e| match e {
            RegistryError::NotFound(_) => RegistryError::NotFound(trial_id.to_string()),
            other => other,
        })?;
        map_study(&study)
    }
}

fn at<'a>(v: &'a Value, path: &[&str]) -> &'a Value {
    path.iter().fold(v, |v, k| v.get(*k).unwrap_or(&Value::Null))
}

fn str_at(v: &Value, path: &[&str]) -> String {
    at(v, path).as_str().unwrap_or_default().to_string()
}

fn arr_at<'a>(v: &'a Value, path: &[&str]) -> &'a [Value] {
    at(v, path).as_array().map(Vec::as_slice).unwrap_or_default()
}

fn str_list(v: &Value, path: &[&str]) -> Vec<String> {
    arr_at(v, path).iter().filter_map(Value::as_str).map(str::to_string).collect()
}

/// Registry dates come as `YYYY-MM-DD` or `YYYY-MM`.
fn parse_partial_date(text: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .ok()
        .or_else(|| NaiveDate::parse_from_str(&format!("{text}-01"), "%Y-%m-%d").ok())
}

fn posted_date(study: &Value) -> Option<NaiveDate> {
    parse_partial_date(&str_at(study, &["protocolSection", "statusModule", "studyFirstPostDateStruct", "date"]))
}

fn measurement_value(raw: &str) -> FieldValue {
    match crate::extraction::parse_number(raw) {
        Some(n) => FieldValue::Number(n),
        None if raw.trim().is_empty() || raw.trim().eq_ignore_ascii_case("na") => FieldValue::NotReported,
        None => FieldValue::Text(raw.trim().to_string()),
    }
}

/// Maps a v2 study object onto [`TrialRecord`].
pub(crate) fn map_study(study: &Value) -> Result<TrialRecord, RegistryError> {
    let p = at(study, &["protocolSection"]);
    let trial_id = str_at(p, &["identificationModule", "nctId"]);
    check_trial_id(&trial_id).map_err(|_| RegistryError::Malformed(format!("study with bad id {trial_id:?}")))?;
    let first_posted =
        posted_date(study).ok_or_else(|| RegistryError::Malformed(format!("{trial_id}: no first-posted date")))?;
    let arms = arr_at(p, &["armsInterventionsModule", "armGroups"])
        .iter()
        .map(|g| Arm {
            label: str_at(g, &["label"]),
            arm_type: str_at(g, &["type"]),
            description: str_at(g, &["description"]),
            intervention_names: str_list(g, &["interventionNames"]),
        })
        .collect();
    let interventions = arr_at(p, &["armsInterventionsModule", "interventions"])
        .iter()
        .map(|i| str_at(i, &["name"]))
        .filter(|n| !n.is_empty())
        .collect();
    let results = at(study, &["resultsSection"]);

    let baseline = at(results, &["baselineCharacteristicsModule"]);
    let baseline_groups: Vec<MeasureGroup> = arr_at(baseline, &["groups"])
        .iter()
        .map(|g| {
            let id = str_at(g, &["id"]);
            let count = arr_at(baseline, &["denoms"])
                .first()
                .map(|d| {
                    arr_at(d, &["counts"])
                        .iter()
                        .find(|c| str_at(c, &["groupId"]) == id)
                        .map(|c| str_at(c, &["value"]))
                        .unwrap_or_default()
                })
                .unwrap_or_default();
            MeasureGroup {
                group_id: id,
                unit: arr_at(baseline, &["denoms"]).first().map(|d| str_at(d, &["units"])).unwrap_or_default(),
                value: count,
                definition: format!("{}: {}", str_at(g, &["title"]), str_at(g, &["description"])),
            }
        })
        .collect();
    let participant_flow = arr_at(baseline, &["measures"])
        .iter()
        .map(|m| {
            let measurements: Vec<&Value> = arr_at(m, &["classes"])
                .iter()
                .flat_map(|c| arr_at(c, &["categories"]))
                .flat_map(|c| arr_at(c, &["measurements"]))
                .collect();
            let results = baseline_groups
                .iter()
                .map(|g| MeasureResult {
                    group_id: g.group_id.clone(),
                    value: measurements
                        .iter()
                        .find(|x| str_at(x, &["groupId"]) == g.group_id)
                        .map(|x| measurement_value(&str_at(x, &["value"])))
                        .unwrap_or(FieldValue::NotReported),
                    notes: String::new(),
                })
                .collect();
            ParticipantMeasure {
                measure_definition: str_at(m, &["title"]),
                parameter_type: str_at(m, &["paramType"]),
                unit: str_at(m, &["unitOfMeasure"]),
                groups: baseline_groups.clone(),
                results,
            }
        })
        .collect();

    let mut reported_results = Vec::new();
    for om in arr_at(results, &["outcomeMeasuresModule", "outcomeMeasures"]) {
        let denom = arr_at(om, &["denoms"]).first();
        for g in arr_at(om, &["groups"]) {
            let gid = str_at(g, &["id"]);
            let denominator_value = denom.and_then(|d| {
                arr_at(d, &["counts"])
                    .iter()
                    .find(|c| str_at(c, &["groupId"]) == gid)
                    .and_then(|c| crate::extraction::parse_number(&str_at(c, &["value"])))
            });
            let mut values = Vec::new();
            for class in arr_at(om, &["classes"]) {
                for cat in arr_at(class, &["categories"]) {
                    for m in arr_at(cat, &["measurements"]) {
                        if str_at(m, &["groupId"]) == gid {
                            let title = [str_at(class, &["title"]), str_at(cat, &["title"])]
                                .into_iter()
                                .filter(|s| !s.is_empty())
                                .collect::<Vec<_>>()
                                .join(" / ");
                            values.push(OutcomeValue { value: measurement_value(&str_at(m, &["value"])), title });
                        }
                    }
                }
            }
            reported_results.push(OutcomeResult {
                outcome_definition: str_at(om, &["title"]),
                group_definition: str_at(g, &["title"]),
                parameter_type: str_at(om, &["paramType"]),
                unit: str_at(om, &["unitOfMeasure"]),
                timeframe: str_at(om, &["timeFrame"]),
                denominator_unit: denom.map(|d| str_at(d, &["units"])).unwrap_or_default(),
                denominator_value,
                results: values,
            });
        }
    }
    let enrollment = at(p, &["designModule", "enrollmentInfo", "count"]).as_u64().unwrap_or(0);
    let record = TrialRecord {
        trial_id,
        title: str_at(p, &["identificationModule", "briefTitle"]),
        conditions: str_list(p, &["conditionsModule", "conditions"]),
        interventions,
        enrollment,
        study_type: str_at(p, &["designModule", "studyType"]),
        first_posted,
        arms,
        participant_flow,
        has_results: !reported_results.is_empty(),
        reported_results,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::extract::{Path, Query};
    use axum::http::StatusCode;
    use axum::routing::get;
    use axum::{Json, Router};
    use serde_json::json;
    use std::collections::HashMap;

    fn study(id: &str, posted: &str) -> Value {
        json!({
            "protocolSection": {
                "identificationModule": {"nctId": id, "briefTitle": format!("Trial {id}")},
                "statusModule": {"studyFirstPostDateStruct": {"date": posted}},
                "conditionsModule": {"conditions": ["Stroke"]},
                "designModule": {"studyType": "INTERVENTIONAL", "enrollmentInfo": {"count": 120}},
                "armsInterventionsModule": {
                    "armGroups": [
                        {"label": "Aspirin", "type": "EXPERIMENTAL", "description": "100 mg", "interventionNames": ["Drug: Aspirin"]},
                        {"label": "Placebo", "type": "PLACEBO_COMPARATOR", "interventionNames": ["Drug: Placebo"]}
                    ],
                    "interventions": [{"name": "Aspirin"}, {"name": "Placebo"}]
                }
            },
            "resultsSection": {
                "baselineCharacteristicsModule": {
                    "groups": [{"id": "BG000", "title": "Aspirin"}, {"id": "BG001", "title": "Placebo"}],
                    "denoms": [{"units": "Participants", "counts": [{"groupId": "BG000", "value": "60"}, {"groupId": "BG001", "value": "60"}]}],
                    "measures": [{"title": "Age", "paramType": "MEAN", "unitOfMeasure": "years",
                        "classes": [{"categories": [{"measurements": [{"groupId": "BG000", "value": "64.2"}, {"groupId": "BG001", "value": "63.9"}]}]}]}]
                },
                "outcomeMeasuresModule": {"outcomeMeasures": [{
                    "title": "Recurrent stroke", "paramType": "COUNT_OF_PARTICIPANTS", "unitOfMeasure": "Participants",
                    "timeFrame": "12 months",
                    "groups": [{"id": "OG000", "title": "Aspirin"}, {"id": "OG001", "title": "Placebo"}],
                    "denoms": [{"units": "Participants", "counts": [{"groupId": "OG000", "value": "60"}, {"groupId": "OG001", "value": "60"}]}],
                    "classes": [{"categories": [{"measurements": [{"groupId": "OG000", "value": "4"}, {"groupId": "OG001", "value": "9"}]}]}]
                }]}
            }
        })
    }

    #[test]
    fn maps_study_to_record() {
        let r = map_study(&study("NCT01234567", "2019-01-15")).unwrap();
        assert_eq!(r.trial_id, "NCT01234567");
        assert_eq!(r.enrollment, 120);
        assert!(r.has_results);
        assert_eq!(r.arms.len(), 2);
        assert_eq!(r.arms[1].arm_type, "PLACEBO_COMPARATOR");
        assert_eq!(r.reported_results.len(), 2);
        assert_eq!(r.reported_results[1].results[0].value, FieldValue::Number(9.0));
        assert_eq!(r.reported_results[1].denominator_value, Some(60.0));
        assert_eq!(r.participant_flow[0].results[0].value, FieldValue::Number(64.2));
        assert_eq!(r.first_posted, NaiveDate::from_ymd_opt(2019, 1, 15).unwrap());
    }

    async fn serve() -> String {
        let pages = vec![
            vec![study("NCT00000001", "2021-01-01"), study("NCT00000002", "2018-06")],
            vec![study("NCT00000003", "2017-01-01"), study("NCT00000001", "2021-01-01")],
        ];
        let app = Router::new()
            .route(
                "/studies",
                get(move |Query(q): Query<HashMap<String, String>>| {
                    let pages = pages.clone();
                    async move {
                        if q.get("query.term").map(String::as_str) == Some("((") {
                            return Err((StatusCode::BAD_REQUEST, "bad query"));
                        }
                        let idx: usize = q.get("pageToken").map(|t| t.parse().unwrap()).unwrap_or(0);
                        let mut body = json!({"studies": pages[idx]});
                        if idx + 1 < pages.len() {
                            body["nextPageToken"] = json!((idx + 1).to_string());
                        }
                        Ok(Json(body))
                    }
                }),
            )
            .route(
                "/studies/{id}",
                get(|Path(id): Path<String>| async move {
                    if id == "NCT01234567" {
                        Ok(Json(study(&id, "2019-01-15")))
                    } else {
                        Err(StatusCode::NOT_FOUND)
                    }
                }),
            );
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
        format!("http://{addr}")
    }

    fn client(base: String) -> CtGovClient {
        CtGovClient::new(CtGovConfig { base_url: base, requests_per_second: 1000.0, ..Default::default() }).unwrap()
    }

    #[tokio::test]
    async fn search_follows_page_tokens_dedups_and_filters_dates() {
        let c = client(serve().await);
        assert_eq!(
            c.search_trials("stroke", 10, None).await.unwrap(),
            vec!["NCT00000001", "NCT00000002", "NCT00000003"]
        );
        let ceiling = NaiveDate::from_ymd_opt(2019, 1, 1);
        assert_eq!(c.search_trials("stroke", 10, ceiling).await.unwrap(), vec!["NCT00000002", "NCT00000003"]);
        assert_eq!(c.search_trials("stroke", 1, None).await.unwrap(), vec!["NCT00000001"]);
        assert!(matches!(c.search_trials("((", 5, None).await, Err(RegistryError::QueryRejected(_))));
    }

    #[tokio::test]
    async fn fetch_maps_and_reports_not_found() {
        let c = client(serve().await);
        assert!(c.fetch_trial("NCT01234567").await.unwrap().has_results);
        assert_eq!(c.fetch_trial("NCT07654321").await, Err(RegistryError::NotFound("NCT07654321".into())));
        assert!(matches!(c.fetch_trial("ABC123").await, Err(RegistryError::InvalidArgument(_))));
    }
}
