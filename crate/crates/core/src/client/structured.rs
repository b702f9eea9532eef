//! Strict per-template JSON schemas with lenient framing.
//!
//! Replies are scanned for the first JSON object (so code fences and chatty
//! preambles are tolerated), then validated field by field. Unknown ordinal
//! values degrade to the conservative level and flag the payload.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::template::TemplateKind;
use crate::level::OrdinalLevel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipleBatch {
    pub principles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteBody {
    pub final_answer: String,
    pub reasons: Vec<String>,
    pub uncertainty: OrdinalLevel,
    pub evidence: Vec<String>,
    pub reasoning: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteBatch {
    pub routes: Vec<RouteBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<OrdinalLevel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateBody {
    pub answer: String,
    pub reasons: Vec<String>,
    pub uncertainty: OrdinalLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum StructuredBody {
    Principles(PrincipleBatch),
    Routes(RouteBatch),
    Aggregate(AggregateBody),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredPayload {
    pub kind: TemplateKind,
    pub body: StructuredBody,
    /// Leniency notes: unknown ordinal values, ignored extra fields.
    pub warnings: Vec<String>,
}

impl StructuredPayload {
    pub fn into_principles(self) -> Option<PrincipleBatch> {
        match self.body {
            StructuredBody::Principles(p) => Some(p),
            _ => None,
        }
    }

    pub fn into_routes(self) -> Option<RouteBatch> {
        match self.body {
            StructuredBody::Routes(r) => Some(r),
            _ => None,
        }
    }

    pub fn into_aggregate(self) -> Option<AggregateBody> {
        match self.body {
            StructuredBody::Aggregate(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot parse {kind:?} reply: {message}")]
pub struct ParseError {
    pub kind: TemplateKind,
    pub message: String,
}

/// Returns the first JSON object embedded in `raw`, if any.
pub fn extract_first_object(raw: &str) -> Option<Map<String, Value>> {
    raw.char_indices().filter(|&(_, c)| c == '{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

pub fn parse_structured(kind: TemplateKind, raw: &str) -> Result<StructuredPayload, ParseError> {
    let fail = |message: String| ParseError { kind, message };
    let doc = extract_first_object(raw).ok_or_else(|| fail("no JSON object found".into()))?;
    let mut v = Validator { warnings: Vec::new() };
    let body = match kind {
        TemplateKind::PrincipleInit | TemplateKind::PrincipleEvolve => {
            v.no_extra(&doc, "$", &["principles"]);
            StructuredBody::Principles(PrincipleBatch {
                principles: v.string_list(&doc, "$", "principles").map_err(fail)?,
            })
        }
        TemplateKind::MultiRoute => {
            v.no_extra(&doc, "$", &["routes", "diversity"]);
            let routes_raw = doc
                .get("routes")
                .and_then(Value::as_array)
                .ok_or_else(|| fail("`routes` missing or not an array".into()))?;
            let mut routes = Vec::with_capacity(routes_raw.len());
            for (i, r) in routes_raw.iter().enumerate() {
                let path = format!("routes[{i}]");
                let obj = r.as_object().ok_or_else(|| fail(format!("`{path}` is not an object")))?;
                v.no_extra(
                    obj,
                    &path,
                    &["final_answer", "reasons", "uncertainty", "evidence", "reasoning", "summary"],
                );
                routes.push(RouteBody {
                    final_answer: v.string(obj, &path, "final_answer").map_err(fail)?,
                    reasons: v.string_list(obj, &path, "reasons").map_err(fail)?,
                    uncertainty: v.level(obj, &path, "uncertainty", OrdinalLevel::High).map_err(fail)?,
                    evidence: v.string_list(obj, &path, "evidence").map_err(fail)?,
                    reasoning: v.string(obj, &path, "reasoning").map_err(fail)?,
                    summary: v.string(obj, &path, "summary").map_err(fail)?,
                });
            }
            let diversity = match doc.get("diversity") {
                None | Some(Value::Null) => None,
                Some(_) => Some(v.level(&doc, "$", "diversity", OrdinalLevel::Low).map_err(fail)?),
            };
            StructuredBody::Routes(RouteBatch { routes, diversity })
        }
        TemplateKind::Aggregate => {
            v.no_extra(&doc, "$", &["answer", "reasons", "uncertainty"]);
            StructuredBody::Aggregate(AggregateBody {
                answer: v.string(&doc, "$", "answer").map_err(fail)?,
                reasons: v.string_list(&doc, "$", "reasons").map_err(fail)?,
                uncertainty: v.level(&doc, "$", "uncertainty", OrdinalLevel::High).map_err(fail)?,
            })
        }
    };
    Ok(StructuredPayload { kind, body, warnings: v.warnings })
}

struct Validator {
    warnings: Vec<String>,
}

impl Validator {
    fn no_extra(&mut self, obj: &Map<String, Value>, path: &str, allowed: &[&str]) {
        for key in obj.keys().filter(|k| !allowed.contains(&k.as_str())) {
            self.warnings.push(format!("ignored extra field `{path}.{key}`"));
        }
    }

    fn string(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Result<String, String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(format!("`{path}.{key}` must be a string")),
            None => Err(format!("`{path}.{key}` is missing")),
        }
    }

    fn string_list(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> Result<Vec<String>, String> {
        let arr = match obj.get(key) {
            Some(Value::Array(a)) => a,
            Some(_) => return Err(format!("`{path}.{key}` must be an array of strings")),
            None => return Err(format!("`{path}.{key}` is missing")),
        };
        arr.iter()
            .map(|item| {
                item.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("`{path}.{key}` must contain only strings"))
            })
            .collect()
    }

    fn level(
        &mut self,
        obj: &Map<String, Value>,
        path: &str,
        key: &str,
        conservative: OrdinalLevel,
    ) -> Result<OrdinalLevel, String> {
        let raw = obj.get(key).ok_or_else(|| format!("`{path}.{key}` is missing"))?;
        match raw.as_str().and_then(OrdinalLevel::parse_lenient) {
            Some(level) => Ok(level),
            None => {
                self.warnings.push(format!(
                    "`{path}.{key}` has unknown level {raw}; using {conservative}"
                ));
                Ok(conservative)
            }
        }
    }
}
