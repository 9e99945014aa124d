//! Cross-modal alignment: visual content is described in text by a vision
//! model and merged with the item's textual metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Item};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualText {
    pub item_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedText {
    pub item_id: String,
    pub text: String,
}

const ALIGN_PROMPT: &str = "\
You are describing a product image for a recommender system. Describe the visual \
attributes that reveal why a shopper would want this item. Cover, in short plain \
sentences: (1) aesthetic style, (2) color scheme, (3) usage scenario, and \
(4) lifestyle signals. Do not speculate about price or brand beyond what is visible.";

pub fn build_align_prompt() -> &'static str {
    ALIGN_PROMPT
}

/// Describes the item's image, or returns `None` when it has none.
pub fn align_visual(item: &Item, gateway: &Gateway) -> Result<Option<VisualText>> {
    let Some(image_ref) = &item.image_ref else {
        return Ok(None);
    };
    let text = gateway
        .describe_image(image_ref, build_align_prompt())
        .map_err(|e| Error::gateway(format!("item {}", item.item_id), e))?;
    Ok(Some(VisualText {
        item_id: item.item_id.clone(),
        text: text.trim().to_string(),
    }))
}

/// Aligns every item with an image, in item_id order.
pub fn align_catalog(catalog: &Catalog, gateway: &Gateway) -> Result<Vec<VisualText>> {
    let mut out = Vec::new();
    for item in catalog.iter() {
        if let Some(v) = align_visual(item, gateway)? {
            out.push(v);
        }
    }
    Ok(out)
}

/// Section-labelled concatenation of title, description and (optional)
/// visual description.
pub fn unified_multimodal_text(item: &Item, visual: Option<&VisualText>) -> Result<UnifiedText> {
    let mut text = format!("Title: {}\nDescription: {}", item.title, item.description);
    if let Some(v) = visual {
        if v.item_id != item.item_id {
            return Err(Error::ItemMismatch {
                expected: item.item_id.clone(),
                got: v.item_id.clone(),
            });
        }
        text.push_str("\nVisual: ");
        text.push_str(&v.text);
    }
    Ok(UnifiedText {
        item_id: item.item_id.clone(),
        text,
    })
}

/// Visual-text cache: one `{item_id, text}` record per line.
pub fn save_visual_cache(path: &Path, visuals: &[VisualText]) -> Result<()> {
    jsonl::write_records(path, visuals)
}

pub fn load_visual_cache(path: &Path) -> Result<BTreeMap<String, VisualText>> {
    Ok(jsonl::read_records::<VisualText>(path)?
        .into_iter()
        .map(|v| (v.item_id.clone(), v))
        .collect())
}
