//! HTTP embedding client.
//!
//! Wire format: POST with JSON body `{"model": ..., "input": [...]}`;
//! response `{"data": [{"index": i, "embedding": [...]}, ...]}` with entries
//! reordered by `index`. Bearer auth comes from the `MAFIN_EMBED_TOKEN`
//! environment variable. Transient failures are retried with exponential
//! backoff; a changed embedding dimension is fatal (it would silently
//! corrupt every downstream score).

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::provider::{reject_bad_batch, BlackBoxProvider, ProviderError, DEFAULT_MAX_BATCH};
use crate::vector::{l2_normalize, EmbeddingVector};

/// Environment variable holding the bearer token.
pub const EMBED_TOKEN_ENV: &str = "MAFIN_EMBED_TOKEN";

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    /// Full endpoint URL, e.g. `https://host/v1/embeddings`.
    pub base_url: String,
    pub model: String,
    pub embed_dim: usize,
    pub max_batch: usize,
    /// Total attempts per batch (first try included).
    pub attempts: u32,
    pub initial_backoff: Duration,
    /// Character budget per text; longer inputs are truncated with a log line
    /// (the backend's own token-limit behavior is unspecified).
    pub char_budget: usize,
}

impl HttpProviderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, embed_dim: usize) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            embed_dim,
            max_batch: DEFAULT_MAX_BATCH,
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
            char_budget: 8000,
        }
    }
}

pub struct HttpProvider {
    config: HttpProviderConfig,
    identity: String,
    token: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedEntry>,
}

#[derive(Deserialize)]
struct EmbedEntry {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpProvider {
    /// Reads the bearer token from [`EMBED_TOKEN_ENV`]; missing token is an
    /// immediate, actionable error rather than a failure mid-run.
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let token = std::env::var(EMBED_TOKEN_ENV)
            .map_err(|_| ProviderError::TokenMissing(EMBED_TOKEN_ENV))?;
        Ok(Self::with_token(config, token))
    }

    pub fn with_token(config: HttpProviderConfig, token: String) -> Self {
        let identity = format!("http-{}", config.model);
        Self { config, identity, token }
    }

    fn post_once(&self, input: &[&str]) -> Result<EmbedResponse, String> {
        let body = EmbedRequest { model: &self.config.model, input: input.to_vec() };
        let mut response = ureq::post(&self.config.base_url)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        response.body_mut().read_json::<EmbedResponse>().map_err(|e| e.to_string())
    }
}

impl BlackBoxProvider for HttpProvider {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn identity(&self) -> &str {
        &self.identity
    }

    fn max_batch(&self) -> usize {
        self.config.max_batch
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        reject_bad_batch(texts, self.max_batch())?;

        let truncated: Vec<String> = texts
            .iter()
            .map(|t| {
                if t.chars().count() > self.config.char_budget {
                    log::warn!(
                        "truncating input of {} chars to budget {}",
                        t.chars().count(),
                        self.config.char_budget
                    );
                    t.chars().take(self.config.char_budget).collect()
                } else {
                    (*t).to_string()
                }
            })
            .collect();
        let input: Vec<&str> = truncated.iter().map(String::as_str).collect();

        let mut last_error = String::new();
        let mut response = None;
        for attempt in 0..self.config.attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.initial_backoff * 2u32.pow(attempt - 1));
            }
            match self.post_once(&input) {
                Ok(r) => {
                    response = Some(r);
                    break;
                }
                Err(message) => {
                    log::warn!("embed attempt {} failed: {message}", attempt + 1);
                    last_error = message;
                }
            }
        }
        let response = response.ok_or(ProviderError::Transport {
            attempts: self.config.attempts,
            message: last_error,
        })?;

        if response.data.len() != input.len() {
            return Err(ProviderError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                input.len(),
                response.data.len()
            )));
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; input.len()];
        for entry in response.data {
            let slot = slots.get_mut(entry.index).ok_or_else(|| {
                ProviderError::MalformedResponse(format!("index {} out of range", entry.index))
            })?;
            if slot.is_some() {
                return Err(ProviderError::MalformedResponse(format!(
                    "duplicate index {}",
                    entry.index
                )));
            }
            *slot = Some(entry.embedding);
        }
        slots
            .into_iter()
            .map(|slot| {
                let values = slot.ok_or_else(|| {
                    ProviderError::MalformedResponse("missing index in response".into())
                })?;
                if values.len() != self.config.embed_dim {
                    return Err(ProviderError::DimensionDrift {
                        expected: self.config.embed_dim,
                        got: values.len(),
                    });
                }
                let v = EmbeddingVector::new(values)?;
                // Normalize unless the backend already did.
                if v.is_normalized() {
                    Ok(v)
                } else {
                    Ok(l2_normalize(&v)?)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Minimal one-shot HTTP server: answers each connection with the next
    /// canned response, then records the raw request.
    fn spawn_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = vec![0u8; 65536];
                let mut req = Vec::new();
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    req.extend_from_slice(&buf[..n]);
                    if let Some(pos) = find_header_end(&req) {
                        let headers = String::from_utf8_lossy(&req[..pos]).to_string();
                        let content_length = headers
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(str::trim).map(String::from))
                            .and_then(|v| v.parse::<usize>().ok())
                            .unwrap_or(0);
                        if req.len() >= pos + 4 + content_length {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                seen.push(String::from_utf8_lossy(&req).to_string());
                let reason = if status == 200 { "OK" } else { "Error" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/embed"), handle)
    }

    fn find_header_end(req: &[u8]) -> Option<usize> {
        req.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn fast_config(url: &str, dim: usize) -> HttpProviderConfig {
        let mut c = HttpProviderConfig::new(url, "test-model", dim);
        c.attempts = 3;
        c.initial_backoff = Duration::from_millis(1);
        c
    }

    fn body_with(dim: usize, order: &[usize]) -> String {
        let entries: Vec<String> = order
            .iter()
            .map(|&i| {
                let mut values = vec![0.0; dim];
                values[i % dim] = 1.0;
                format!(
                    "{{\"index\":{i},\"embedding\":[{}]}}",
                    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
                )
            })
            .collect();
        format!("{{\"data\":[{}]}}", entries.join(","))
    }

    #[test]
    fn reorders_by_index_and_sends_expected_body() {
        let (url, server) = spawn_server(vec![(200, body_with(4, &[1, 0]))]);
        let provider = HttpProvider::with_token(fast_config(&url, 4), "secret".into());
        let out = provider.embed_batch(&["first", "second"]).unwrap();
        assert_eq!(out[0].values(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(out[1].values(), &[0.0, 1.0, 0.0, 0.0]);
        let seen = server.join().unwrap();
        assert!(seen[0].contains("Bearer secret"), "auth header missing:\n{}", seen[0]);
        let body_start = seen[0].find("\r\n\r\n").unwrap() + 4;
        let body: serde_json::Value = serde_json::from_str(&seen[0][body_start..]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["input"], serde_json::json!(["first", "second"]));
    }

    #[test]
    fn retries_transient_failures() {
        let (url, server) = spawn_server(vec![
            (500, "{\"error\":\"transient\"}".into()),
            (200, body_with(4, &[0])),
        ]);
        let provider = HttpProvider::with_token(fast_config(&url, 4), "t".into());
        let out = provider.embed_batch(&["text"]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn exhausted_retries_report_attempts() {
        let (url, server) = spawn_server(vec![
            (500, "{}".into()),
            (500, "{}".into()),
            (500, "{}".into()),
        ]);
        let provider = HttpProvider::with_token(fast_config(&url, 4), "t".into());
        match provider.embed_batch(&["text"]).unwrap_err() {
            ProviderError::Transport { attempts, .. } => assert_eq!(attempts, 3),
            other => panic!("unexpected error {other}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn dimension_drift_is_fatal() {
        let (url, server) = spawn_server(vec![(200, body_with(4, &[0]))]);
        let provider = HttpProvider::with_token(fast_config(&url, 8), "t".into());
        assert!(matches!(
            provider.embed_batch(&["text"]).unwrap_err(),
            ProviderError::DimensionDrift { expected: 8, got: 4 }
        ));
        server.join().unwrap();
    }

    #[test]
    fn unnormalized_backend_vectors_are_normalized() {
        let body = "{\"data\":[{\"index\":0,\"embedding\":[3.0,4.0]}]}".to_string();
        let (url, server) = spawn_server(vec![(200, body)]);
        let provider = HttpProvider::with_token(fast_config(&url, 2), "t".into());
        let out = provider.embed_batch(&["text"]).unwrap();
        assert_eq!(out[0].values(), &[0.6, 0.8]);
        server.join().unwrap();
    }

    #[test]
    fn missing_token_is_actionable() {
        std::env::remove_var(EMBED_TOKEN_ENV);
        let Err(err) = HttpProvider::new(HttpProviderConfig::new("http://x", "m", 4)) else {
            panic!("expected missing-token error");
        };
        assert!(err.to_string().contains(EMBED_TOKEN_ENV));
    }
}
