use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendFailure, BackendReply, ChatBackend, ChatRequest, GatewayError, TokenUsage};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// e.g. `https://api.openai.com/v1`
    pub base_url: String,
    pub chat_model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

/// Client for OpenAI-compatible `/chat/completions` and `/embeddings`.
pub struct OpenAiBackend {
    config: OpenAiConfig,
    api_key: Option<String>,
    http: reqwest::Client,
    id: String,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, GatewayError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::MalformedRequest(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok();
        let id = format!("openai:{}", config.chat_model);
        Ok(Self { config, api_key, http, id })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    async fn post(&self, path: &str, body: serde_json::Value) -> Result<serde_json::Value, BackendFailure> {
        let mut req = self.http.post(self.url(path)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| BackendFailure::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendFailure::RateLimited(after));
        }
        if status.is_server_error() {
            return Err(BackendFailure::Transient(format!("HTTP {status}")));
        }
        if status.is_client_error() {
            let text = resp.text().await.unwrap_or_default();
            return Err(BackendFailure::Malformed(format!("HTTP {status}: {text}")));
        }
        resp.json()
            .await
            .map_err(|e| BackendFailure::Fatal(GatewayError::InvalidResponse(e.to_string())))
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

fn invalid(e: impl std::fmt::Display) -> BackendFailure {
    BackendFailure::Fatal(GatewayError::InvalidResponse(e.to_string()))
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn chat(&self, request: &ChatRequest) -> Result<BackendReply, BackendFailure> {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        let mut body = json!({
            "model": self.config.chat_model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let value = self.post("chat/completions", body).await?;
        let parsed: ChatCompletion = serde_json::from_value(value).map_err(invalid)?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| invalid("no choices in completion"))?;
        Ok(BackendReply {
            text,
            usage: parsed.usage.map(|u| TokenUsage { input: u.prompt_tokens, output: u.completion_tokens }),
        })
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendFailure> {
        let model = self
            .config
            .embedding_model
            .as_deref()
            .ok_or_else(|| BackendFailure::Malformed("no embedding model configured".into()))?;
        let value = self.post("embeddings", json!({"model": model, "input": texts})).await?;
        let mut parsed: EmbeddingResponse = serde_json::from_value(value).map_err(invalid)?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, RetryPolicy};
    use axum::http::StatusCode;
    use axum::routing::post;
    use axum::{Json, Router};
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    async fn serve(router: Router) -> String {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        format!("http://{addr}/v1")
    }

    fn config(base_url: String) -> OpenAiConfig {
        OpenAiConfig {
            base_url,
            chat_model: "test-model".into(),
            embedding_model: Some("test-embed".into()),
            api_key_env: "LITMINE_TEST_NO_SUCH_KEY".into(),
            timeout_secs: 5,
        }
    }

    #[tokio::test]
    async fn chat_round_trip_and_503_retry() {
        let hits = Arc::new(AtomicU32::new(0));
        let h = hits.clone();
        let router = Router::new().route(
            "/v1/chat/completions",
            post(move |Json(body): Json<serde_json::Value>| {
                let h = h.clone();
                async move {
                    if h.fetch_add(1, Ordering::SeqCst) < 2 {
                        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})));
                    }
                    let user = body["messages"][1]["content"].as_str().unwrap().to_string();
                    (
                        StatusCode::OK,
                        Json(json!({
                            "choices": [{"message": {"role": "assistant", "content": format!("re: {user}")}}],
                            "usage": {"prompt_tokens": 11, "completion_tokens": 2}
                        })),
                    )
                }
            }),
        );
        let base = serve(router).await;
        let backend = OpenAiBackend::new(config(base)).unwrap();
        let gw = Gateway::new(Arc::new(backend)).with_retry(RetryPolicy::immediate(3));
        let resp = gw.complete(&ChatRequest::new("sys", "hello")).await.unwrap();
        assert_eq!(resp.text, "re: hello");
        assert_eq!(resp.token_usage, TokenUsage { input: 11, output: 2 });
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        assert_eq!(resp.backend_id, "openai:test-model");
    }

    #[tokio::test]
    async fn client_error_is_malformed_and_429_is_rate_limited() {
        let router = Router::new()
            .route("/v1/chat/completions", post(|| async { (StatusCode::BAD_REQUEST, "bad") }))
            .route(
                "/v1/embeddings",
                post(|| async { (StatusCode::TOO_MANY_REQUESTS, [("retry-after", "7")], "slow down") }),
            );
        let base = serve(router).await;
        let gw = Gateway::new(Arc::new(OpenAiBackend::new(config(base)).unwrap()))
            .with_retry(RetryPolicy::immediate(1));
        let err = gw.complete(&ChatRequest::new("", "x")).await.unwrap_err();
        assert!(matches!(err, GatewayError::MalformedRequest(_)));
        let err = gw.embed(&["x".into()]).await.unwrap_err();
        assert_eq!(err, GatewayError::RateLimited { retry_after: Some(Duration::from_secs(7)) });
    }

    #[tokio::test]
    async fn embeddings_are_reordered_by_index() {
        let router = Router::new().route(
            "/v1/embeddings",
            post(|| async {
                Json(json!({"data": [
                    {"index": 1, "embedding": [0.0, 1.0]},
                    {"index": 0, "embedding": [1.0, 0.0]}
                ]}))
            }),
        );
        let base = serve(router).await;
        let gw = Gateway::new(Arc::new(OpenAiBackend::new(config(base)).unwrap()));
        let v = gw.embed(&["a".into(), "b".into()]).await.unwrap();
        assert_eq!(v[0].values(), &[1.0, 0.0]);
        assert_eq!(v[1].values(), &[0.0, 1.0]);
    }
}
