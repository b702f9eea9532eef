//! Grounding manifest ingestion, the model-facing summary, and evidence citation
//! validation against the grounded-object inventory.
//!
//! The summary handed to the model only carries image sizes and object counts.
//! Object labels stay on this side and are used exclusively to validate the
//! citations a route makes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::level::OrdinalLevel;

/// Default per-image object cap.
pub const DEFAULT_MAX_OBJECTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub image_index: u32,
    pub source_id: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedObject {
    pub image_index: u32,
    pub object_index: u32,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Validated grounding inventory. Images are sorted by index, objects by
/// `(image_index, object_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSet {
    images: Vec<ImageMeta>,
    objects: Vec<GroundedObject>,
    cap_per_image: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GroundingError {
    #[error("manifest parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("manifest integrity error: {0}")]
    Integrity(String),
}

impl GroundingError {
    fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        GroundingError::Parse { field: field.into(), message: message.into() }
    }
}

/// Non-fatal observations made while loading a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestWarning {
    pub image_index: u32,
    pub message: String,
}

/// Loads and validates a manifest, dropping objects beyond `cap` per image.
pub fn load_grounding_set(manifest: &[u8], cap: usize) -> Result<GroundingSet, GroundingError> {
    load_grounding_set_with_warnings(manifest, cap).map(|(set, _)| set)
}

pub fn load_grounding_set_with_warnings(
    manifest: &[u8],
    cap: usize,
) -> Result<(GroundingSet, Vec<ManifestWarning>), GroundingError> {
    if cap == 0 {
        return Err(GroundingError::parse("cap", "object cap must be positive"));
    }
    let doc: Value = serde_json::from_slice(manifest)
        .map_err(|e| GroundingError::parse("$", format!("not a JSON document: {e}")))?;
    let root = doc
        .as_object()
        .ok_or_else(|| GroundingError::parse("$", "expected a JSON object"))?;

    let images_raw = root
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| GroundingError::parse("images", "missing or not an array"))?;
    let objects_raw = root
        .get("objects")
        .and_then(Value::as_array)
        .ok_or_else(|| GroundingError::parse("objects", "missing or not an array"))?;

    let mut images = Vec::with_capacity(images_raw.len());
    for (i, raw) in images_raw.iter().enumerate() {
        let path = format!("images[{i}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| GroundingError::parse(&path, "expected an object"))?;
        let image = ImageMeta {
            image_index: positive_u32(obj, &path, "image_index")?,
            source_id: string_field(obj, &path, "source_id")?,
            width: positive_u32(obj, &path, "width")?,
            height: positive_u32(obj, &path, "height")?,
        };
        images.push(image);
    }
    images.sort_by_key(|m| m.image_index);
    for pair in images.windows(2) {
        if pair[0].image_index == pair[1].image_index {
            return Err(GroundingError::Integrity(format!(
                "duplicate image_index {}",
                pair[0].image_index
            )));
        }
    }
    let sizes: BTreeMap<u32, (u32, u32)> =
        images.iter().map(|m| (m.image_index, (m.width, m.height))).collect();

    let mut by_image: BTreeMap<u32, Vec<GroundedObject>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for (i, raw) in objects_raw.iter().enumerate() {
        let path = format!("objects[{i}]");
        let obj = raw
            .as_object()
            .ok_or_else(|| GroundingError::parse(&path, "expected an object"))?;
        let image_index = positive_u32(obj, &path, "image_index")?;
        let object_index = positive_u32(obj, &path, "object_index")?;
        let label = string_field(obj, &path, "label")?;
        if label.trim().is_empty() {
            return Err(GroundingError::parse(format!("{path}.label"), "label must be nonempty"));
        }
        let bbox = match obj.get("bbox") {
            None | Some(Value::Null) => None,
            Some(v) => Some(parse_bbox(v, &format!("{path}.bbox"))?),
        };
        let score = match obj.get("score") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let s = v
                    .as_f64()
                    .ok_or_else(|| GroundingError::parse(format!("{path}.score"), "expected a number"))?;
                if !(0.0..=1.0).contains(&s) {
                    return Err(GroundingError::parse(format!("{path}.score"), "must lie in [0, 1]"));
                }
                Some(s)
            }
        };
        let Some(&(width, height)) = sizes.get(&image_index) else {
            return Err(GroundingError::Integrity(format!(
                "{path} references image_index {image_index} which is not in images"
            )));
        };
        if let Some([x0, y0, x1, y1]) = bbox {
            let inside = x0 >= 0.0 && y0 >= 0.0 && x1 <= width as f64 && y1 <= height as f64;
            if !(x0 < x1 && y0 < y1 && inside) {
                return Err(GroundingError::parse(
                    format!("{path}.bbox"),
                    format!("box must satisfy x0<x1, y0<y1 within {width}x{height}"),
                ));
            }
        }
        if !seen.insert((image_index, object_index)) {
            return Err(GroundingError::Integrity(format!(
                "duplicate object img#{image_index}_obj#{object_index}"
            )));
        }
        by_image.entry(image_index).or_default().push(GroundedObject {
            image_index,
            object_index,
            label,
            bbox,
            score,
        });
    }

    let mut warnings = Vec::new();
    let mut objects = Vec::new();
    for (image_index, mut group) in by_image {
        if group.len() > cap {
            group.sort_by(eviction_order);
            warnings.push(ManifestWarning {
                image_index,
                message: format!("dropped {} objects beyond the cap of {cap}", group.len() - cap),
            });
            group.truncate(cap);
        }
        group.sort_by_key(|o| o.object_index);
        objects.extend(group);
    }

    Ok((GroundingSet { images, objects, cap_per_image: cap }, warnings))
}

/// Retention priority: scored objects by descending score, then unscored ones;
/// ties by ascending object index.
fn eviction_order(a: &GroundedObject, b: &GroundedObject) -> std::cmp::Ordering {
    match (a.score, b.score) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    }
    .then(a.object_index.cmp(&b.object_index))
}

fn positive_u32(obj: &Map<String, Value>, path: &str, key: &str) -> Result<u32, GroundingError> {
    let field = format!("{path}.{key}");
    let v = obj
        .get(key)
        .ok_or_else(|| GroundingError::parse(&field, "missing field"))?;
    let n = v
        .as_u64()
        .ok_or_else(|| GroundingError::parse(&field, "expected a positive integer"))?;
    if n == 0 || n > u32::MAX as u64 {
        return Err(GroundingError::parse(&field, "expected a positive integer"));
    }
    Ok(n as u32)
}

fn string_field(obj: &Map<String, Value>, path: &str, key: &str) -> Result<String, GroundingError> {
    let field = format!("{path}.{key}");
    obj.get(key)
        .ok_or_else(|| GroundingError::parse(&field, "missing field"))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| GroundingError::parse(&field, "expected a string"))
}

fn parse_bbox(v: &Value, field: &str) -> Result<[f64; 4], GroundingError> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| GroundingError::parse(field, "expected [x0, y0, x1, y1]"))?;
    let mut out = [0.0; 4];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = item
            .as_f64()
            .ok_or_else(|| GroundingError::parse(field, "coordinates must be numbers"))?;
    }
    Ok(out)
}

impl GroundingSet {
    pub fn new(images: Vec<ImageMeta>, objects: Vec<GroundedObject>, cap_per_image: usize) -> Result<Self, GroundingError> {
        let doc = manifest_value(&images, &objects);
        load_grounding_set(doc.to_string().as_bytes(), cap_per_image)
    }

    pub fn empty(cap_per_image: usize) -> Self {
        GroundingSet { images: Vec::new(), objects: Vec::new(), cap_per_image }
    }

    pub fn images(&self) -> &[ImageMeta] {
        &self.images
    }

    pub fn objects(&self) -> &[GroundedObject] {
        &self.objects
    }

    pub fn cap_per_image(&self) -> usize {
        self.cap_per_image
    }

    pub fn object(&self, image_index: u32, object_index: u32) -> Option<&GroundedObject> {
        self.objects
            .binary_search_by(|o| (o.image_index, o.object_index).cmp(&(image_index, object_index)))
            .ok()
            .map(|i| &self.objects[i])
    }

    pub fn objects_in(&self, image_index: u32) -> impl Iterator<Item = &GroundedObject> {
        self.objects.iter().filter(move |o| o.image_index == image_index)
    }

    pub fn has_image(&self, image_index: u32) -> bool {
        self.images.iter().any(|m| m.image_index == image_index)
    }

    /// Serializes back to the manifest schema.
    pub fn to_manifest(&self) -> Value {
        manifest_value(&self.images, &self.objects)
    }
}

fn manifest_value(images: &[ImageMeta], objects: &[GroundedObject]) -> Value {
    json!({ "images": images, "objects": objects })
}

/// One line per image, `img#<k>: <W>x<H>, <M> objects`, in image order.
pub fn build_grounding_summary(gs: &GroundingSet) -> String {
    gs.images
        .iter()
        .map(|m| {
            let count = gs.objects_in(m.image_index).count();
            format!("img#{}: {}x{}, {} objects", m.image_index, m.width, m.height, count)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// A canonical grounded-object citation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub image_index: u32,
    pub object_index: u32,
    pub label: String,
}

impl fmt::Display for EvidenceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "img#{}_obj#{}({})", self.image_index, self.object_index, self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a canonical evidence reference: {0:?}")]
pub struct ParseEvidenceError(pub String);

static CANONICAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)^img#([0-9]+)_obj#([0-9]+)\((.*)\)$").unwrap());
static IMAGE_HINT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"img#([0-9]+)").unwrap());
static REF_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"img#[0-9]+(?:_obj#[0-9]+)?").unwrap());

impl FromStr for EvidenceRef {
    type Err = ParseEvidenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseEvidenceError(s.to_string());
        let caps = CANONICAL.captures(s).ok_or_else(err)?;
        let image_index: u32 = caps[1].parse().map_err(|_| err())?;
        let object_index: u32 = caps[2].parse().map_err(|_| err())?;
        if image_index == 0 || object_index == 0 {
            return Err(err());
        }
        Ok(EvidenceRef { image_index, object_index, label: caps[3].to_string() })
    }
}

pub fn format_evidence_ref(r: &EvidenceRef) -> String {
    r.to_string()
}

/// A citation after canonicalization: either a resolved inventory object or
/// the raw text that could not be matched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Citation {
    Resolved(EvidenceRef),
    Unresolved(String),
}

impl Citation {
    pub fn is_resolved(&self) -> bool {
        matches!(self, Citation::Resolved(_))
    }
}

/// Resolves raw route citations against the inventory: canonical form with a
/// valid index first, then a unique case-insensitive label match within the
/// cited image (or the only image).
pub fn canonicalize_evidence<S: AsRef<str>>(raw: &[S], gs: &GroundingSet) -> Vec<Citation> {
    raw.iter().map(|item| canonicalize_one(item.as_ref(), gs)).collect()
}

fn canonicalize_one(raw: &str, gs: &GroundingSet) -> Citation {
    let trimmed = raw.trim();
    let parsed = trimmed.parse::<EvidenceRef>().ok();
    if let Some(r) = &parsed {
        if let Some(obj) = gs.object(r.image_index, r.object_index) {
            return Citation::Resolved(EvidenceRef {
                image_index: obj.image_index,
                object_index: obj.object_index,
                label: obj.label.clone(),
            });
        }
    }

    let hint = IMAGE_HINT
        .captures(trimmed)
        .and_then(|c| c[1].parse::<u32>().ok());
    let candidate = match &parsed {
        Some(r) => r.label.clone(),
        None => match (trimmed.find('('), trimmed.rfind(')')) {
            (Some(open), Some(close)) if open < close => trimmed[open + 1..close].to_string(),
            _ => REF_TOKEN.replace_all(trimmed, " ").into_owned(),
        },
    };
    let candidate = normalize_label(&candidate);

    let scope = match hint {
        Some(k) if gs.has_image(k) => Some(k),
        Some(_) => None,
        None if gs.images.len() == 1 => Some(gs.images[0].image_index),
        None => None,
    };
    if let (Some(k), false) = (scope, candidate.is_empty()) {
        let mut matches = gs.objects_in(k).filter(|o| normalize_label(&o.label) == candidate);
        if let (Some(obj), None) = (matches.next(), matches.next()) {
            return Citation::Resolved(EvidenceRef {
                image_index: obj.image_index,
                object_index: obj.object_index,
                label: obj.label.clone(),
            });
        }
    }
    Citation::Unresolved(raw.to_string())
}

fn normalize_label(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let words: Vec<&str> = lowered
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .collect();
    let start = match words.first() {
        Some(&("the" | "a" | "an")) if words.len() > 1 => 1,
        _ => 0,
    };
    words[start..].join(" ")
}

/// Discretizes the resolved-citation ratio: `>= 0.8` high, `>= 0.4` medium,
/// otherwise (including no citations) low.
pub fn assess_evidence_level(citations: &[Citation]) -> OrdinalLevel {
    let total = citations.len();
    if total == 0 {
        return OrdinalLevel::Low;
    }
    let resolved = citations.iter().filter(|c| c.is_resolved()).count();
    if 5 * resolved >= 4 * total {
        OrdinalLevel::High
    } else if 5 * resolved >= 2 * total {
        OrdinalLevel::Medium
    } else {
        OrdinalLevel::Low
    }
}
