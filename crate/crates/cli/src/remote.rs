//! Chat-completions client for OpenAI-compatible endpoints.

use std::time::Duration;

use serde_json::json;
use sig_core::baselines::{LlmClient, LlmRequest};
use sig_core::Error;

pub const API_KEY_VAR: &str = "SIG_LLM_API_KEY";

pub struct RemoteClient {
    endpoint: String,
    model: String,
    api_key: String,
    agent: ureq::Agent,
}

impl RemoteClient {
    /// Reads the credential from [`API_KEY_VAR`].
    pub fn from_env(endpoint: &str, model: &str) -> anyhow::Result<Self> {
        let api_key = std::env::var(API_KEY_VAR).map_err(|_| anyhow::anyhow!("{API_KEY_VAR} is not set"))?;
        Ok(RemoteClient {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        })
    }
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

fn client_error(message: String, retriable: bool) -> Error {
    Error::Client { message, retriable }
}

impl LlmClient for RemoteClient {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &LlmRequest) -> sig_core::Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let response = self
            .agent
            .post(&format!("{}/chat/completions", self.endpoint))
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let value: serde_json::Value = match response {
            Ok(r) => r.into_json().map_err(|e| client_error(format!("reading response: {e}"), true))?,
            Err(ureq::Error::Status(code, _)) => {
                return Err(client_error(format!("HTTP {code}"), code == 429 || code >= 500));
            }
            Err(e) => return Err(client_error(e.to_string(), true)),
        };
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| client_error("response has no message content".into(), false))
    }
}
