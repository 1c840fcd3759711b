//! Catalog and engagement-log records plus their JSON-lines files.
//!
//! Products carry up to 20 frozen image embeddings and 12 text fields.
//! Engagement events pair a query payload with an engaged product on one of
//! two surfaces; they are both the training labels and the evaluation pairs.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_IMAGES: usize = 20;
pub const TEXT_FIELD_COUNT: usize = 12;
pub const TEXT_FIELD_NAMES: [&str; TEXT_FIELD_COUNT] = [
    "title",
    "description",
    "merchant_domain",
    "links",
    "google_product_category",
    "product_types",
    "brand",
    "colors",
    "materials",
    "patterns",
    "size",
    "size_type",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: u64,
    /// Pretrained image embeddings, at most [`MAX_IMAGES`], all same dim.
    pub image_embeddings: Vec<Vec<f32>>,
    pub title: String,
    pub description: String,
    pub merchant_domain: String,
    pub links: Vec<String>,
    pub google_product_category: String,
    pub product_types: Vec<String>,
    pub brand: String,
    pub colors: Vec<String>,
    pub materials: Vec<String>,
    pub patterns: Vec<String>,
    pub size: String,
    pub size_type: String,
}

impl Product {
    pub fn validate(&self, image_dim: usize) -> Result<()> {
        if self.image_embeddings.len() > MAX_IMAGES {
            return Err(Error::Input(format!(
                "product {}: {} image embeddings exceeds the cap of {MAX_IMAGES}",
                self.id,
                self.image_embeddings.len()
            )));
        }
        for (i, e) in self.image_embeddings.iter().enumerate() {
            if e.len() != image_dim {
                return Err(Error::Input(format!(
                    "product {}: image {i} has dim {}, expected {image_dim}",
                    self.id,
                    e.len()
                )));
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "product {}: image {i} contains a non-finite value",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// The 12 text fields in stored order, multi-valued ones joined with
    /// single spaces into one string each.
    pub fn text_fields(&self) -> [String; TEXT_FIELD_COUNT] {
        [
            self.title.clone(),
            self.description.clone(),
            self.merchant_domain.clone(),
            self.links.join(" "),
            self.google_product_category.clone(),
            self.product_types.join(" "),
            self.brand.clone(),
            self.colors.join(" "),
            self.materials.join(" "),
            self.patterns.join(" "),
            self.size.clone(),
            self.size_type.clone(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Closeup,
    Search,
}

impl Surface {
    pub const ALL: [Surface; 2] = [Surface::Closeup, Surface::Search];

    pub fn as_str(self) -> &'static str {
        match self {
            Surface::Closeup => "closeup",
            Surface::Search => "search",
        }
    }
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Surface {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closeup" => Ok(Surface::Closeup),
            "search" => Ok(Surface::Search),
            other => Err(Error::Input(format!("unknown surface {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engagement {
    Click,
    Save,
    AddToCart,
    Checkout,
}

impl Engagement {
    pub const ALL: [Engagement; 4] = [
        Engagement::Click,
        Engagement::Save,
        Engagement::AddToCart,
        Engagement::Checkout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Engagement::Click => "click",
            Engagement::Save => "save",
            Engagement::AddToCart => "add_to_cart",
            Engagement::Checkout => "checkout",
        }
    }

    /// Conversion events carry purchase intent; they are rarer and their
    /// signal is structurally different from browse engagement.
    pub fn is_conversion(self) -> bool {
        matches!(self, Engagement::AddToCart | Engagement::Checkout)
    }
}

impl fmt::Display for Engagement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Engagement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "click" => Ok(Engagement::Click),
            "save" => Ok(Engagement::Save),
            "add_to_cart" => Ok(Engagement::AddToCart),
            "checkout" => Ok(Engagement::Checkout),
            other => Err(Error::Input(format!("unknown engagement type {other:?}"))),
        }
    }
}

/// What the user issued: a query image's embedding on the closeup surface,
/// or a query string on the search surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    Image {
        embedding: Vec<f32>,
    },
    Text {
        terms: String,
        /// Output of the frozen search-query encoder for `terms`, stored so
        /// training and evaluation never have to re-derive it.
        #[serde(default)]
        embedding: Vec<f32>,
    },
}

impl Query {
    /// The precomputed query embedding, if present.
    pub fn embedding(&self) -> Option<&[f32]> {
        match self {
            Query::Image { embedding } => Some(embedding),
            Query::Text { embedding, .. } if !embedding.is_empty() => Some(embedding),
            Query::Text { .. } => None,
        }
    }

    /// Stable byte key for deduplication and hashing.
    pub fn key_bytes(&self) -> Vec<u8> {
        match self {
            Query::Image { embedding } => {
                let mut out = Vec::with_capacity(1 + 4 * embedding.len());
                out.push(0u8);
                for x in embedding {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
                out
            }
            Query::Text { terms, .. } => {
                let mut out = Vec::with_capacity(1 + terms.len());
                out.push(1u8);
                out.extend_from_slice(terms.as_bytes());
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngagementEvent {
    pub surface: Surface,
    pub engagement: Engagement,
    pub query: Query,
    pub product_id: u64,
    pub weight: f32,
}

impl EngagementEvent {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 1.0 && self.weight.is_finite()) {
            return Err(Error::Input(format!(
                "event weight must be ≥ 1 and finite, got {}",
                self.weight
            )));
        }
        if let Some(e) = self.query.embedding() {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(
                    "query embedding contains a non-finite value".into(),
                ));
            }
        }
        match (&self.query, self.surface) {
            (Query::Image { .. }, Surface::Closeup) | (Query::Text { .. }, Surface::Search) => {
                Ok(())
            }
            _ => Err(Error::Input(format!(
                "query payload kind does not match surface {}",
                self.surface
            ))),
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Format(format!("serialize: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{e}"),
        })?;
        out.push(item);
    }
    Ok(out)
}
