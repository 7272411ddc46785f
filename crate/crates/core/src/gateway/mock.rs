use std::collections::VecDeque;

use async_trait::async_trait;
use parking_lot::Mutex;

use super::{ErrorKind, Provider, ProviderError, ProviderRequest, ProviderResponse, TokenLogprob, Usage};
use crate::prompt::PromptBudget;

/// One scripted provider reaction.
#[derive(Debug, Clone, PartialEq)]
pub enum MockStep {
    Respond {
        text: String,
        logprobs: Option<Vec<TokenLogprob>>,
    },
    Fail {
        kind: ErrorKind,
        message: String,
    },
}

impl MockStep {
    pub fn respond(text: impl Into<String>) -> Self {
        MockStep::Respond {
            text: text.into(),
            logprobs: None,
        }
    }

    pub fn respond_with_logprobs(text: impl Into<String>, logprobs: &[(&str, f64)]) -> Self {
        MockStep::Respond {
            text: text.into(),
            logprobs: Some(
                logprobs
                    .iter()
                    .map(|(token, logprob)| TokenLogprob {
                        token: token.to_string(),
                        logprob: *logprob,
                    })
                    .collect(),
            ),
        }
    }

    pub fn fail(kind: ErrorKind) -> Self {
        MockStep::Fail {
            kind,
            message: format!("mock provider error: {kind}"),
        }
    }

    pub fn fail_with(kind: ErrorKind, message: impl Into<String>) -> Self {
        MockStep::Fail {
            kind,
            message: message.into(),
        }
    }
}

#[derive(Debug)]
struct Script {
    steps: VecDeque<MockStep>,
    /// Replays the final step forever once the script runs out.
    repeat_last: bool,
}

impl Script {
    fn next(&mut self) -> Option<MockStep> {
        if self.repeat_last && self.steps.len() == 1 {
            return self.steps.front().cloned();
        }
        self.steps.pop_front()
    }
}

#[derive(Debug)]
struct Route {
    needle: String,
    script: Mutex<Script>,
}

/// Offline provider driven by scripts.
///
/// A request is served by the first route whose needle occurs in the prompt,
/// otherwise by the default script. Each script is consumed in order, so
/// routing on record content keeps results independent of the order in which
/// concurrent workers issue requests. An exhausted script fails with a
/// delegated server fault. Every request received is logged.
#[derive(Debug)]
pub struct MockProvider {
    routes: Vec<Route>,
    default: Mutex<Script>,
    requests: Mutex<Vec<ProviderRequest>>,
    context_window: usize,
}

impl MockProvider {
    fn with_default(script: Script) -> Self {
        MockProvider {
            routes: Vec::new(),
            default: Mutex::new(script),
            requests: Mutex::new(Vec::new()),
            context_window: PromptBudget::default().context_tokens,
        }
    }

    /// Serves `steps` in order to all requests. An empty script behaves as
    /// already exhausted.
    pub fn scripted(steps: impl IntoIterator<Item = MockStep>) -> Self {
        Self::with_default(Script {
            steps: steps.into_iter().collect(),
            repeat_last: false,
        })
    }

    /// Answers every request with `step`.
    pub fn always(step: MockStep) -> Self {
        Self::with_default(Script {
            steps: VecDeque::from([step]),
            repeat_last: true,
        })
    }

    /// Adds a script for prompts containing `needle`.
    pub fn route(mut self, needle: impl Into<String>, steps: impl IntoIterator<Item = MockStep>) -> Self {
        self.routes.push(Route {
            needle: needle.into(),
            script: Mutex::new(Script {
                steps: steps.into_iter().collect(),
                repeat_last: false,
            }),
        });
        self
    }

    pub fn with_context_window(mut self, tokens: usize) -> Self {
        self.context_window = tokens;
        self
    }

    pub fn requests(&self) -> Vec<ProviderRequest> {
        self.requests.lock().clone()
    }

    fn next_step(&self, prompt: &str) -> Option<MockStep> {
        match self.routes.iter().find(|r| prompt.contains(&r.needle)) {
            Some(route) => route.script.lock().next(),
            None => self.default.lock().next(),
        }
    }
}

#[async_trait]
impl Provider for MockProvider {
    async fn complete(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        self.requests.lock().push(request.clone());
        match self.next_step(&request.prompt) {
            Some(MockStep::Respond { text, logprobs }) => {
                let completion_tokens = logprobs.as_ref().map_or(0, |l| l.len() as u64);
                let logprobs = if request.request_logprobs { logprobs } else { None };
                let raw = serde_json::json!({ "text": text, "logprobs": logprobs }).to_string();
                Ok(ProviderResponse {
                    text,
                    token_logprobs: logprobs,
                    usage: Usage {
                        prompt_tokens: request.prompt.len().div_ceil(4) as u64,
                        completion_tokens,
                    },
                    raw_provider_payload: raw,
                })
            }
            Some(MockStep::Fail { kind, message }) => Err(ProviderError::Kind { kind, message }),
            None => Err(ProviderError::Kind {
                kind: ErrorKind::ServerFault,
                message: "mock script exhausted".to_string(),
            }),
        }
    }

    fn context_window(&self, _model: &str) -> usize {
        self.context_window
    }
}
