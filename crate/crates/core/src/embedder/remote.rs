//! HTTP client for a remote embeddings endpoint.
//!
//! Wire protocol: POST JSON `{"model": <name>, "input": [<prompts>]}`,
//! response `{"data": [{"embedding": [...]}, ...]}` in request order. A
//! bearer token read from `TSLAB_EMBED_TOKEN` is attached when present.

use std::time::Duration;

use serde::Deserialize;

use crate::serializer::PromptText;

use super::{EmbedError, EmbeddingVector, ProviderConfig};

pub const TOKEN_ENV_VAR: &str = "TSLAB_EMBED_TOKEN";

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f32>,
}

pub fn fetch_embedding(
    cfg: &ProviderConfig,
    prompt: &PromptText,
) -> Result<EmbeddingVector, EmbedError> {
    let endpoint = cfg
        .endpoint
        .as_deref()
        .ok_or_else(|| EmbedError::Provider("remote provider requires an endpoint".into()))?;
    let body = serde_json::json!({
        "model": cfg.model_name,
        "input": [prompt.text],
    });
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(true)
        .build()
        .into();
    let token = std::env::var(TOKEN_ENV_VAR).ok();

    let mut last_err = String::new();
    let attempts = cfg.max_retries + 1;
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 << (attempt - 1)));
        }
        let mut req = agent.post(endpoint);
        if let Some(t) = &token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let parsed: EmbeddingsResponse =
                    resp.body_mut().read_json().map_err(|e| EmbedError::Provider(
                        format!("malformed response body: {e}"),
                    ))?;
                let item = parsed
                    .data
                    .into_iter()
                    .next()
                    .ok_or_else(|| EmbedError::Provider("empty data array".into()))?;
                if item.embedding.len() != cfg.dim {
                    return Err(EmbedError::Dim {
                        want: cfg.dim,
                        got: item.embedding.len(),
                    });
                }
                return Ok(EmbeddingVector {
                    values: item.embedding,
                });
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(EmbedError::Transport {
        attempts,
        message: last_err,
    })
}
