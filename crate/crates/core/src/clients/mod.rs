//! External model backends: error type, JSON-over-HTTP implementations and a
//! disk cache keyed by request hash.
//!
//! The client traits live next to the code that consumes them
//! ([`SelectorClient`](crate::diagnosis::SelectorClient),
//! [`EmbeddingClient`](crate::simgraph::EmbeddingClient),
//! [`TranslatorClient`](crate::simgraph::TranslatorClient),
//! [`SuggesterClient`](crate::revise::SuggesterClient)).

mod cache;
mod http;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CachedEmbedder, CachedSelector, CachedSuggester, CachedTranslator, DiskCache};
pub use http::{HttpEmbedder, HttpSelector, HttpSuggester, HttpTranslator};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("{backend} unavailable: {message}")]
    Unavailable { backend: String, message: String },
    #[error("{backend} returned an invalid response: {message}")]
    InvalidResponse { backend: String, message: String },
}

/// Connection settings for an OpenAI-compatible endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    120
}

/// Either the built-in offline stub or a remote endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientSpec {
    Stub(StubTag),
    Http(Endpoint),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubTag {
    Stub,
}

impl Default for ClientSpec {
    fn default() -> Self {
        ClientSpec::Stub(StubTag::Stub)
    }
}

impl ClientSpec {
    pub fn is_stub(&self) -> bool {
        matches!(self, ClientSpec::Stub(_))
    }
}
