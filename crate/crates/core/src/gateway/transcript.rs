use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, GatewayError, Provider};
use crate::error::Result;

/// One audited gateway call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Chat { request: ChatRequest, response: String },
    Embed { text: String, response: Vec<f64> },
    DescribeImage { image_ref: String, prompt: String, response: String },
}

/// Provider answering from a recorded transcript. Requests that were never
/// recorded fail with [`GatewayError::InvalidRequest`].
#[derive(Debug, Default)]
pub struct ReplayProvider {
    chats: HashMap<String, String>,
    embeds: HashMap<String, Vec<f64>>,
    images: HashMap<(String, String), String>,
}

fn chat_key(req: &ChatRequest) -> String {
    serde_json::to_string(req).expect("request serializes")
}

impl ReplayProvider {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut r = Self::default();
        for e in entries {
            match e {
                TranscriptEntry::Chat { request, response } => {
                    r.chats.insert(chat_key(&request), response);
                }
                TranscriptEntry::Embed { text, response } => {
                    r.embeds.insert(text, response);
                }
                TranscriptEntry::DescribeImage { image_ref, prompt, response } => {
                    r.images.insert((image_ref, prompt), response);
                }
            }
        }
        r
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::from_entries(crate::jsonl::read_records::<TranscriptEntry>(path)?))
    }
}

fn not_recorded(what: &str) -> GatewayError {
    GatewayError::InvalidRequest(format!("no recorded response for {what}"))
}

impl Provider for ReplayProvider {
    fn id(&self) -> &str {
        "replay"
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.chats.get(&chat_key(request)).cloned().ok_or_else(|| not_recorded("chat request"))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.embeds.get(text).cloned().ok_or_else(|| not_recorded("embedding"))
    }

    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, GatewayError> {
        self.images
            .get(&(image_ref.to_string(), prompt.to_string()))
            .cloned()
            .ok_or_else(|| not_recorded(image_ref))
    }
}
