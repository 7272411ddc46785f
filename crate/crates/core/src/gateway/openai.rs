//! Adapter for the OpenAI-compatible `/v1/completions` wire format.

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{Provider, ProviderError, ProviderRequest, ProviderResponse, TokenLogprob, Usage};
use crate::model::ParamValue;

pub const BASE_URL_ENV: &str = "ANNOWEAVE_LLM_BASE_URL";
pub const API_KEY_ENV: &str = "ANNOWEAVE_LLM_API_KEY";

const DEFAULT_BASE_URL: &str = "https://api.openai.com";

#[derive(Debug, Clone)]
pub struct OpenAiCompletions {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl OpenAiCompletions {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        OpenAiCompletions {
            client: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    /// Reads the base URL and API key from the environment.
    pub fn from_env() -> Self {
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Self::new(base, std::env::var(API_KEY_ENV).ok())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.base_url)
    }

    /// JSON body sent for `request`.
    pub fn request_body(request: &ProviderRequest) -> Value {
        let mut body = Map::new();
        body.insert("model".into(), json!(request.config.model));
        body.insert("prompt".into(), json!(request.prompt));
        for (name, value) in &request.config.params {
            let v = match value {
                ParamValue::Bool(b) => json!(b),
                ParamValue::Int(i) => json!(i),
                ParamValue::Float(x) => json!(x),
                ParamValue::Text(s) => json!(s),
            };
            body.insert(name.clone(), v);
        }
        if request.request_logprobs {
            body.insert("logprobs".into(), json!(1));
        }
        Value::Object(body)
    }

    /// Parses a successful completions payload.
    pub fn parse_response(payload: &str) -> Result<ProviderResponse, ProviderError> {
        let parsed: CompletionPayload = serde_json::from_str(payload)
            .map_err(|e| ProviderError::Other(format!("malformed completions payload: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Other("completions payload has no choices".into()))?;
        let token_logprobs = choice.logprobs.map(|lp| {
            let tokens = lp.tokens.unwrap_or_default();
            lp.token_logprobs
                .into_iter()
                .enumerate()
                // the first token's logprob is null when the prompt is echoed
                .filter_map(|(i, logprob)| {
                    logprob.map(|logprob| TokenLogprob {
                        token: tokens.get(i).cloned().unwrap_or_default(),
                        logprob,
                    })
                })
                .collect()
        });
        let usage = parsed.usage.unwrap_or_default();
        Ok(ProviderResponse {
            text: choice.text,
            token_logprobs,
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
            },
            raw_provider_payload: payload.to_string(),
        })
    }

    fn parse_error(status: u16, payload: &str) -> ProviderError {
        match serde_json::from_str::<ErrorPayload>(payload) {
            Ok(ErrorPayload { error }) => ProviderError::Http {
                status,
                code: error.code.or(error.kind),
                message: error.message,
            },
            Err(_) => ProviderError::Http {
                status,
                code: None,
                message: payload.to_string(),
            },
        }
    }
}

#[derive(Deserialize)]
struct CompletionPayload {
    choices: Vec<Choice>,
    usage: Option<UsagePayload>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    logprobs: Option<LogprobPayload>,
}

#[derive(Deserialize)]
struct LogprobPayload {
    tokens: Option<Vec<String>>,
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize, Default)]
struct UsagePayload {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct ErrorPayload {
    error: ErrorBody,
}

#[derive(Deserialize)]
struct ErrorBody {
    message: String,
    #[serde(rename = "type")]
    kind: Option<String>,
    code: Option<String>,
}

#[async_trait]
impl Provider for OpenAiCompletions {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        let mut call = self.client.post(self.endpoint()).json(&Self::request_body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout(e.to_string())
            } else if e.is_connect() {
                ProviderError::Connection(e.to_string())
            } else {
                ProviderError::Other(e.to_string())
            }
        })?;
        let status = response.status();
        let payload = response
            .text()
            .await
            .map_err(|e| ProviderError::Connection(e.to_string()))?;
        if !status.is_success() {
            return Err(Self::parse_error(status.as_u16(), &payload));
        }
        Self::parse_response(&payload)
    }

    fn context_window(&self, model: &str) -> usize {
        match model {
            "davinci" | "curie" | "babbage" | "ada" => 2049,
            "gpt-3.5-turbo-instruct" => 4096,
            _ => 4097,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn body_carries_params_and_logprobs() {
        let request = ProviderRequest {
            prompt: "Text: x\nLabel:".into(),
            config: ModelConfig::new("openai", "davinci")
                .with_param("temperature", 0.0)
                .with_param("max_tokens", 16i64),
            request_logprobs: true,
        };
        let body = OpenAiCompletions::request_body(&request);
        assert_eq!(
            body,
            json!({"model": "davinci", "prompt": "Text: x\nLabel:", "temperature": 0.0, "max_tokens": 16, "logprobs": 1})
        );
    }

    #[test]
    fn parses_choice_text_and_logprobs() {
        let payload = r#"{"choices":[{"text":" entailment","logprobs":{"tokens":[" entail","ment"],"token_logprobs":[-0.1,-0.3]}}],"usage":{"prompt_tokens":40,"completion_tokens":2}}"#;
        let resp = OpenAiCompletions::parse_response(payload).unwrap();
        assert_eq!(resp.text, " entailment");
        assert_eq!(resp.usage.completion_tokens, 2);
        let lps = resp.token_logprobs.unwrap();
        assert_eq!(lps[1].token, "ment");
        assert_eq!(lps[1].logprob, -0.3);
        assert_eq!(resp.raw_provider_payload, payload);
    }

    #[test]
    fn missing_logprobs_stay_absent() {
        let resp = OpenAiCompletions::parse_response(r#"{"choices":[{"text":"x"}]}"#).unwrap();
        assert!(resp.token_logprobs.is_none());
    }

    #[test]
    fn error_payload_keeps_code() {
        let e = OpenAiCompletions::parse_error(
            400,
            r#"{"error":{"message":"too long","type":"invalid_request_error","code":"context_length_exceeded"}}"#,
        );
        assert_eq!(
            e,
            ProviderError::Http {
                status: 400,
                code: Some("context_length_exceeded".into()),
                message: "too long".into()
            }
        );
    }
}
