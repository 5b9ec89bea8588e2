//! Chat-completion annotator over HTTP.
//!
//! Request body: `{"model", "temperature", "messages": [{"role": "user",
//! "content": prompt}]}`. The completion is read from
//! `choices[0].message.content`. `GAGA_LLM_API_KEY`, when set, is sent as a
//! bearer token.

use std::time::Duration;

use serde::Deserialize;

use super::{AnnotationRequest, Annotator, ProviderError, Result};

#[derive(Clone, Debug)]
pub struct ChatAnnotator {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

impl ChatAnnotator {
    /// Endpoint from `GAGA_LLM_ENDPOINT` and key from `GAGA_LLM_API_KEY`.
    pub fn from_env(model: &str, temperature: f64) -> Result<Self> {
        let endpoint = std::env::var("GAGA_LLM_ENDPOINT")
            .map_err(|_| ProviderError::Config("GAGA_LLM_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var("GAGA_LLM_API_KEY").ok(),
            model: model.to_string(),
            temperature,
            timeout: Duration::from_secs(120),
        })
    }
}

impl Annotator for ChatAnnotator {
    fn provider_id(&self) -> String {
        format!("chat:{}:t{}", self.model, self.temperature)
    }

    fn complete(&self, request: &AnnotationRequest<'_>) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{ "role": "user", "content": request.prompt }],
        });
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(ProviderError::transport)?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(ProviderError::Remote {
                status: Some(status),
                message: resp.body_mut().read_to_string().unwrap_or_default(),
            });
        }
        let parsed: ChatResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Malformed(format!("chat response: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(ProviderError::Malformed("empty completion".into()));
        }
        Ok(text)
    }
}
