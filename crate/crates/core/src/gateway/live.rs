//! OpenAI-compatible HTTP provider (`/chat/completions`, `/embeddings`).

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};
use ureq::Agent;

use super::{ChatRequest, GatewayConfig, GatewayError, Provider};
use crate::error::{Error, Result};

pub struct LiveProvider {
    agent: Agent,
    base: String,
    api_key: Option<String>,
    chat_model: String,
    vision_model: String,
    embed_model: String,
    attempts: u32,
    backoff: Duration,
}

impl LiveProvider {
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self> {
        let base = cfg
            .api_base
            .clone()
            .or_else(|| std::env::var("MODEL_API_BASE").ok())
            .ok_or_else(|| Error::config("gateway.api_base", "live provider needs an endpoint (or MODEL_API_BASE)"))?;
        let api_key = cfg.api_key.clone().or_else(|| std::env::var("MODEL_API_KEY").ok());
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            base: base.trim_end_matches('/').to_string(),
            api_key,
            chat_model: cfg.chat_model.clone(),
            vision_model: cfg.vision_model.clone(),
            embed_model: cfg.embed_model.clone(),
            attempts: cfg.retry_attempts.max(1),
            backoff: Duration::from_millis(cfg.retry_backoff_ms),
        })
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.base, path);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(map_transport)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string())),
            401 | 403 => Err(GatewayError::Auth { status }),
            _ => Err(GatewayError::Provider {
                status,
                message: provider_message(&text),
            }),
        }
    }

    /// Retries timeouts and 5xx responses with exponential backoff
    /// (base, 2x base, 4x base, ...).
    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt + 1 < self.attempts => {
                    let wait = self.backoff * 2u32.pow(attempt);
                    log::warn!("{path}: {e}; retrying in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn chat_with_messages(&self, model: &str, messages: Value, temperature: f64, max_tokens: u32) -> Result<String, GatewayError> {
        let body = json!({
            "model": model,
            "messages": messages,
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        let resp = self.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))
    }
}

fn map_transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::Timeout,
        other => GatewayError::Network(other.to_string()),
    }
}

fn provider_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/message").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| body.chars().take(200).collect())
}

fn mime_for(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    }
}

/// Remote references pass through; local files are inlined as data URLs.
pub(crate) fn image_url(image_ref: &str) -> Result<String, GatewayError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref.strip_prefix("file://").unwrap_or(image_ref));
    let bytes = std::fs::read(path).map_err(|e| GatewayError::UnreadableImage {
        image_ref: image_ref.to_string(),
        reason: e.to_string(),
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for(path)))
}

impl Provider for LiveProvider {
    fn id(&self) -> &str {
        "live"
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let model = request.model.as_deref().unwrap_or(&self.chat_model);
        let messages = json!([
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": request.user_prompt},
        ]);
        self.chat_with_messages(model, messages, request.temperature, request.max_tokens)
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let body = json!({"model": self.embed_model, "input": text});
        let resp = self.post("embeddings", &body)?;
        let arr = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::MalformedResponse("missing data[0].embedding".into()))?;
        arr.iter()
            .map(|v| v.as_f64().ok_or_else(|| GatewayError::MalformedResponse("non-numeric embedding entry".into())))
            .collect()
    }

    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, GatewayError> {
        let url = image_url(image_ref)?;
        let messages = json!([{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": url}},
            ],
        }]);
        self.chat_with_messages(&self.vision_model, messages, 0.0, 512)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `responses` in order (the last one repeats) and records each
    /// request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, Arc<std::sync::Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(std::sync::Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                b.lock().unwrap().push(String::from_utf8(body).unwrap());
                let n = h.fetch_add(1, Ordering::SeqCst);
                let (status, text) = &responses[n.min(responses.len() - 1)];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), hits, bodies)
    }

    fn provider(base: String) -> LiveProvider {
        LiveProvider::from_config(&GatewayConfig {
            provider: super::super::ProviderKind::Live,
            api_base: Some(base),
            api_key: Some("bad-key".into()),
            retry_backoff_ms: 1,
            timeout_secs: 5,
            ..GatewayConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn invalid_key_is_not_retried() {
        let (base, hits, _) = serve(vec![(401, r#"{"error":{"message":"bad key"}}"#.into())]);
        let p = provider(base);
        let err = p.chat(&ChatRequest::new("s", "u")).unwrap_err();
        assert_eq!(err, GatewayError::Auth { status: 401 });
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_errors_retry_then_succeed() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"fine"}}]}"#;
        let (base, hits, bodies) = serve(vec![(503, "{}".into()), (500, "{}".into()), (200, ok.into())]);
        let p = provider(base);
        let mut req = ChatRequest::new("sys", "user");
        req.model = Some("classifier".into());
        assert_eq!(p.chat(&req).unwrap(), "fine");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        let sent: Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["model"], "classifier");
        assert_eq!(sent["messages"][0]["role"], "system");
        assert_eq!(sent["messages"][1]["content"], "user");
    }

    #[test]
    fn gives_up_after_configured_attempts() {
        let (base, hits, _) = serve(vec![(502, r#"{"error":{"message":"down"}}"#.into())]);
        let err = provider(base).chat(&ChatRequest::new("s", "u")).unwrap_err();
        assert!(matches!(err, GatewayError::Provider { status: 502, ref message } if message == "down"));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn parses_embeddings() {
        let (base, _, bodies) = serve(vec![(200, r#"{"data":[{"embedding":[0.5,-0.25]}]}"#.into())]);
        assert_eq!(provider(base).embed("hello").unwrap(), vec![0.5, -0.25]);
        let sent: Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["input"], "hello");
    }

    #[test]
    fn missing_image_file_is_unreadable() {
        let p = provider("http://127.0.0.1:9/v1".into());
        let err = p.describe_image("/definitely/not/here.jpg", "describe").unwrap_err();
        assert!(matches!(err, GatewayError::UnreadableImage { .. }));
    }

    #[test]
    fn local_images_become_data_urls() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        let url = image_url(path.to_str().unwrap()).unwrap();
        assert_eq!(url, "data:image/png;base64,AQID");
        assert_eq!(image_url("https://x/y.jpg").unwrap(), "https://x/y.jpg");
    }
}
