//! Blocking clients for OpenAI-compatible `chat/completions` and
//! `embeddings` endpoints.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ClientError, Endpoint};
use crate::diagnosis::{
    build_selection_user_message, parse_selector_answer, SelectionRequest, SelectorClient,
    SelectorResponse,
};
use crate::revise::{SuggesterClient, Suggestion, SuggestionRequest};
use crate::simgraph::{EmbeddingClient, TranslatorClient};
use crate::text::normalize_label;

struct Transport {
    agent: ureq::Agent,
    endpoint: Endpoint,
    name: String,
}

impl Transport {
    fn new(kind: &str, endpoint: Endpoint) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            name: format!("{kind}:{}", endpoint.model),
            endpoint,
        }
    }

    fn unavailable(&self, message: impl ToString) -> ClientError {
        ClientError::Unavailable {
            backend: self.name.clone(),
            message: message.to_string(),
        }
    }

    fn invalid(&self, message: impl ToString) -> ClientError {
        ClientError::InvalidResponse {
            backend: self.name.clone(),
            message: message.to_string(),
        }
    }

    fn post(&self, body: &Value) -> Result<Value, ClientError> {
        let mut req = self.agent.post(&self.endpoint.url);
        if let Some(var) = &self.endpoint.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| self.unavailable(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) if (400..500).contains(&code) && code != 429 => {
                self.invalid(format!("HTTP {code}"))
            }
            other => self.unavailable(other),
        })?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| self.invalid(e))
    }

    fn chat(&self, system: &str, user: &str) -> Result<String, ClientError> {
        let body = json!({
            "model": self.endpoint.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let v = self.post(&body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.invalid("missing choices[0].message.content"))
    }
}

pub struct HttpSelector(Transport);

impl HttpSelector {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(Transport::new("chat", endpoint))
    }
}

impl SelectorClient for HttpSelector {
    fn name(&self) -> &str {
        &self.0.name
    }

    fn select(&self, request: &SelectionRequest) -> Result<SelectorResponse, ClientError> {
        let content = self.0.chat(
            &request.system_prompt,
            &build_selection_user_message(request),
        )?;
        parse_selector_answer(&content).map_err(|e| self.0.invalid(e))
    }
}

pub struct HttpTranslator(Transport);

impl HttpTranslator {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(Transport::new("chat", endpoint))
    }
}

impl TranslatorClient for HttpTranslator {
    fn name(&self) -> &str {
        &self.0.name
    }

    fn translate(&self, term: &str, source_language: &str) -> Result<String, ClientError> {
        let system = format!(
            "Translate the medical term given by the user from the language with ISO code '{source_language}' into English. Reply with the English term only."
        );
        let out = self.0.chat(&system, term)?;
        let out = out.trim().trim_matches('"').trim();
        if out.is_empty() {
            return Err(self.0.invalid("empty translation"));
        }
        Ok(out.to_string())
    }
}

const SUGGESTER_SYSTEM: &str = "You curate the items of a case report form. Given one item and the other items of the same section, decide whether the item names the same clinical concept as one of the others, so that the two can be merged. Reply with a JSON object {\"target\": <label of the matching item, or null>, \"justification\": <one sentence>}.";

#[derive(Deserialize)]
struct SuggesterAnswer {
    target: Option<String>,
    #[serde(default)]
    justification: String,
}

pub struct HttpSuggester(Transport);

impl HttpSuggester {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(Transport::new("chat", endpoint))
    }
}

impl SuggesterClient for HttpSuggester {
    fn name(&self) -> &str {
        &self.0.name
    }

    fn suggest(&self, request: &SuggestionRequest) -> Result<Option<Suggestion>, ClientError> {
        if request.candidates.is_empty() {
            return Ok(None);
        }
        let listed: Vec<String> = request
            .candidates
            .iter()
            .map(|c| format!("- {}", c.label))
            .collect();
        let user = format!(
            "Section: {}\nItem: {}\nOther items:\n{}",
            request.item.section,
            request.item.label,
            listed.join("\n")
        );
        let content = self.0.chat(SUGGESTER_SYSTEM, &user)?;
        let (start, end) = content
            .find('{')
            .zip(content.rfind('}'))
            .ok_or_else(|| self.0.invalid("no JSON object in answer"))?;
        let answer: SuggesterAnswer =
            serde_json::from_str(&content[start..=end]).map_err(|e| self.0.invalid(e))?;
        Ok(answer.target.filter(|t| !t.trim().is_empty()).map(|t| {
            let label = normalize_label(&t);
            let target_item = request
                .candidates
                .iter()
                .find(|c| c.label == label)
                .map_or_else(
                    || crate::crfgen::item_id(request.item.section, &label),
                    |c| c.id.clone(),
                );
            Suggestion {
                target_item,
                justification: answer.justification,
            }
        }))
    }
}

pub struct HttpEmbedder(Transport);

impl HttpEmbedder {
    pub fn new(endpoint: Endpoint) -> Self {
        Self(Transport::new("embeddings", endpoint))
    }
}

impl EmbeddingClient for HttpEmbedder {
    fn name(&self) -> &str {
        &self.0.name
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let v = self
            .0
            .post(&json!({"model": self.0.endpoint.model, "input": texts}))?;
        let data = v["data"]
            .as_array()
            .ok_or_else(|| self.0.invalid("missing data array"))?;
        let mut rows: Vec<(usize, Vec<f32>)> = data
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let idx = row["index"].as_u64().map_or(i, |x| x as usize);
                let vec = row["embedding"]
                    .as_array()
                    .ok_or_else(|| self.0.invalid("missing embedding"))?
                    .iter()
                    .map(|x| {
                        x.as_f64()
                            .map(|f| f as f32)
                            .ok_or_else(|| self.0.invalid("non-numeric embedding"))
                    })
                    .collect::<Result<Vec<f32>, _>>()?;
                Ok((idx, vec))
            })
            .collect::<Result<_, ClientError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        if rows.len() != texts.len() {
            return Err(self.0.invalid(format!(
                "{} embeddings for {} inputs",
                rows.len(),
                texts.len()
            )));
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
