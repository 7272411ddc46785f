//! Shows the completions request body and response parsing. With
//! ANNOWEAVE_LLM_API_KEY set it also makes one live call.

use std::sync::Arc;

use annoweave::gateway::{Gateway, OpenAiCompletions, ProviderRequest, RetryPolicy, SystemClock, API_KEY_ENV};
use annoweave::model::ModelConfig;

#[tokio::main]
async fn main() {
    let request = ProviderRequest {
        prompt:
            "Please label the sentiment of the following text as one of: positive, negative.\nText: what a day\nLabel:"
                .into(),
        config: ModelConfig::new("openai", "gpt-3.5-turbo-instruct")
            .with_param("temperature", 0.0)
            .with_param("max_tokens", 4i64),
        request_logprobs: true,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&OpenAiCompletions::request_body(&request)).unwrap()
    );

    let canned = r#"{"choices":[{"text":" positive","logprobs":{"tokens":[" positive"],"token_logprobs":[-0.04]}}],"usage":{"prompt_tokens":27,"completion_tokens":1}}"#;
    let parsed = OpenAiCompletions::parse_response(canned).unwrap();
    println!("parsed {:?} with {:?}", parsed.text, parsed.token_logprobs);

    if std::env::var(API_KEY_ENV).is_err() {
        println!("{API_KEY_ENV} not set, skipping the live call");
        return;
    }
    let gateway = Gateway::new(Arc::new(SystemClock)).with_provider("openai", Arc::new(OpenAiCompletions::from_env()));
    match gateway.call(&request, &RetryPolicy::default()).await {
        Ok(out) => println!("live: {:?} in {} attempt(s)", out.response.text, out.attempts),
        Err(e) => println!("live call failed: {:?} {}", e.kind, e.message),
    }
}
