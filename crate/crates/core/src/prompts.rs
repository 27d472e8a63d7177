//! Prompt rendering for the visit-pattern, address and surrounding views.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attributes::PoiAttributes;
use crate::corpus::{Poi, PoiId};
use crate::error::{Error, Result};

/// Bump whenever template wording changes; it is part of the feature-cache key.
pub const TEMPLATE_VERSION: &str = "poi-prompt-v1";

const ROLE_PLAY: &str = "You are a geography expert with detailed knowledge of the streets, \
neighborhoods and points of interest of the city, and of how residents and visitors use them.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    VisitPattern,
    Address,
    Surrounding,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::VisitPattern, PromptKind::Address, PromptKind::Surrounding];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::VisitPattern => "visit_pattern",
            PromptKind::Address => "address",
            PromptKind::Surrounding => "surrounding",
        }
    }

    fn question(self) -> &'static str {
        match self {
            PromptKind::VisitPattern => {
                "Question: Given this information, what can you tell about the visiting habits of people at this place?"
            }
            PromptKind::Address => {
                "Question: Given this information, where precisely is this place located and what is the area around this address known for?"
            }
            PromptKind::Surrounding => {
                "Question: Given this information, what is the surrounding environment of this place like?"
            }
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visit_pattern" | "visit" | "V" => Ok(PromptKind::VisitPattern),
            "address" | "A" => Ok(PromptKind::Address),
            "surrounding" | "S" => Ok(PromptKind::Surrounding),
            other => Err(Error::invalid(format!("unknown prompt kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub poi_id: PoiId,
    pub kind: PromptKind,
    pub template_version: String,
    pub text: String,
}

/// Collapses any line breaks or tabs in an attribute value to single spaces.
fn clean(value: &str) -> String {
    value.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn or_unknown(v: &Option<String>) -> String {
    v.as_deref().map(clean).filter(|s| !s.is_empty()).unwrap_or_else(|| "unknown".into())
}

/// "A", "A and B", "A, B and C"
fn join_list(items: &[String]) -> String {
    match items {
        [] => "none".into(),
        [one] => clean(one),
        [init @ .., last] => format!(
            "{} and {}",
            init.iter().map(|s| clean(s)).collect::<Vec<_>>().join(", "),
            clean(last)
        ),
    }
}

pub fn generate_prompt(poi: &Poi, attrs: &PoiAttributes, kind: PromptKind) -> Prompt {
    let mut lines = vec![
        ROLE_PLAY.to_string(),
        "POI Information:".to_string(),
        format!("Name: {}", clean(&poi.name)),
        format!("Latitude: {:.6}", poi.lat),
        format!("Longitude: {:.6}", poi.lon),
        format!("Category: {}", clean(&poi.category)),
    ];
    match kind {
        PromptKind::VisitPattern => {
            let vp = attrs.visit_pattern;
            lines.push(format!("Visit Pattern: {}, {}", vp.daily.describe(), vp.weekly));
            lines.push(format!("Most Visited Time: {}", vp.daily.describe()));
            lines.push(format!("Most Visited Days: {}", vp.weekly));
        }
        PromptKind::Address => {
            lines.push(format!("Street: {}", or_unknown(&attrs.address.street)));
            lines.push(format!("House Number: {}", or_unknown(&attrs.address.house_number)));
            lines.push(format!("Postal Code: {}", or_unknown(&attrs.address.postal_code)));
        }
        PromptKind::Surrounding => {
            lines.push(format!(
                "Surrounding: {}",
                join_list(&attrs.surrounding.top_categories)
            ));
        }
    }
    lines.push(kind.question().to_string());
    Prompt {
        poi_id: poi.id,
        kind,
        template_version: TEMPLATE_VERSION.to_string(),
        text: lines.join("\n"),
    }
}
