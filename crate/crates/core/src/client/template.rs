//! The four stage prompts and the constraint blocks every prompt carries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatRequest, Role};
use crate::fitness::CriterionSet;
use crate::level::OrdinalLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    PrincipleInit,
    PrincipleEvolve,
    MultiRoute,
    Aggregate,
}

pub const PRINCIPLE_INIT: &str = "\
Generate several high-level reasoning principles for answering the visual question.
The image(s) are the primary source of truth.
The grounding summary is optional and may be incomplete or incorrect.
Each principle should describe a general way to reason from visual evidence,
not a specific answer.
Avoid assuming details that cannot be directly verified from the image(s).";

pub const PRINCIPLE_EVOLVE: &str = "\
Refine the reasoning principles for visual question answering.
The image(s) remain the most reliable evidence.
Fitness signals and summaries may be noisy and should be used cautiously.
Preserve strengths of effective principles, discard misleading ones,
and propose new principles that better encourage verification
against visual evidence.
Do not assume that high-scoring principles are always correct.";

pub const MULTI_ROUTE: &str = "\
Answer the visual question using the image(s)
and the single active reasoning principle below.
Generate multiple distinct reasoning routes under the same principle.
For each route:
- Base the reasoning on observable visual evidence.
- Cite visual cues when possible.
- Report uncertainty if evidence is weak or ambiguous.
The grounding summary is only a reference and may be incorrect.
If unsure, do not guess.";

pub const AGGREGATE: &str = "\
Synthesize a final answer from multiple candidate answers.
Treat the image(s) as the authoritative evidence.
Candidate answers may be inconsistent or incorrect.
Prefer answers that are better supported by visual evidence.
Express uncertainty if no answer is clearly justified.
Do not introduce new assumptions beyond what can be verified
from the image(s).";

pub const EVIDENCE_HIERARCHY: &str = "\
[Evidence Hierarchy]
- Image(s) are the most reliable evidence.
- Textual summaries and feedback are auxiliary and may be noisy.
- Text must never override visual observation.
- When uncertainty remains, respond conservatively.";

pub const GROUNDING_REFERENCE_RULE: &str = "\
[Grounding Reference Rule]
- Grounding summaries may be incomplete or incorrect.
- Use them only to guide where to look in the image(s).
- Do not assume grounded attributes unless visually verified.
- If conflicts arise, trust the image(s).";

pub const STRICT_OUTPUT_RULE: &str = "\
[Strict Output Rule]
- Follow the specified JSON schema exactly.
- Do not add extra fields or free-form explanations.
- Use predefined discrete levels for uncertainty and evaluation.
- If information is missing, return a valid placeholder.";

impl TemplateKind {
    pub fn body(self) -> &'static str {
        match self {
            TemplateKind::PrincipleInit => PRINCIPLE_INIT,
            TemplateKind::PrincipleEvolve => PRINCIPLE_EVOLVE,
            TemplateKind::MultiRoute => MULTI_ROUTE,
            TemplateKind::Aggregate => AGGREGATE,
        }
    }
}

/// An elite as shown to the evolution prompt: rank and ordinal criteria only.
#[derive(Debug, Clone, PartialEq)]
pub struct EliteBrief {
    pub rank: usize,
    pub text: String,
    pub criteria: CriterionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBrief {
    pub rank: usize,
    pub answer: String,
    pub summary: String,
    pub uncertainty: OrdinalLevel,
}

/// Placeholders for all four templates. `count` is the number of principles
/// (init/evolve) or routes (multi-route) requested.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemplateContext {
    pub prompt: String,
    pub summary: String,
    pub principle: Option<String>,
    pub elites: Vec<EliteBrief>,
    pub candidates: Vec<CandidateBrief>,
    pub count: usize,
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot render {kind:?} template: missing `{field}`")]
pub struct RenderError {
    pub kind: TemplateKind,
    pub field: &'static str,
}

pub fn render_template(
    kind: TemplateKind,
    ctx: &TemplateContext,
    sampling: Sampling,
    seed: Option<u64>,
) -> Result<ChatRequest, RenderError> {
    let missing = |field| RenderError { kind, field };
    if ctx.prompt.trim().is_empty() {
        return Err(missing("prompt"));
    }
    let needs_count = kind != TemplateKind::Aggregate;
    if needs_count && ctx.count == 0 {
        return Err(missing("count"));
    }

    let mut text = String::new();
    text.push_str(kind.body());
    for block in [EVIDENCE_HIERARCHY, GROUNDING_REFERENCE_RULE, STRICT_OUTPUT_RULE] {
        text.push_str("\n\n");
        text.push_str(block);
    }
    let _ = write!(text, "\n\n[Question]\n{}", ctx.prompt.trim());
    let summary = if ctx.summary.trim().is_empty() { "(none)" } else { ctx.summary.trim() };
    let _ = write!(text, "\n\n[Grounding Summary]\n{summary}");

    match kind {
        TemplateKind::PrincipleInit => {
            let _ = write!(
                text,
                "\n\n[Output Schema]\nReturn exactly {} principles as {{\"principles\": [\"<principle>\", ...]}}.",
                ctx.count
            );
        }
        TemplateKind::PrincipleEvolve => {
            if ctx.elites.is_empty() {
                return Err(missing("elites"));
            }
            text.push_str("\n\n[Elite Principles]");
            for e in &ctx.elites {
                let c = &e.criteria;
                let _ = write!(
                    text,
                    "\n{}. (rank {}; consensus={}, diversity={}, uncertainty={}, evidence={}) {}",
                    e.rank, e.rank, c.consensus, c.diversity, c.uncertainty, c.evidence, e.text.trim()
                );
            }
            let _ = write!(
                text,
                "\n\n[Output Schema]\nReturn exactly {} new principles as {{\"principles\": [\"<principle>\", ...]}}.",
                ctx.count
            );
        }
        TemplateKind::MultiRoute => {
            let principle = ctx
                .principle
                .as_deref()
                .filter(|p| !p.trim().is_empty())
                .ok_or_else(|| missing("principle"))?;
            let _ = write!(text, "\n\n[Active Principle]\n{}", principle.trim());
            let _ = write!(
                text,
                "\n\n[Output Schema]\nProduce exactly {} route(s). Cite evidence as short object phrases, \
prefixed with img#<k> when several images are given.\n\
{{\"routes\": [{{\"final_answer\": str, \"reasons\": [str], \"uncertainty\": \"low|medium|high\", \
\"evidence\": [str], \"reasoning\": str, \"summary\": str}}], \"diversity\": \"low|medium|high\"}}",
                ctx.count
            );
        }
        TemplateKind::Aggregate => {
            if ctx.candidates.is_empty() {
                return Err(missing("candidates"));
            }
            text.push_str("\n\n[Candidate Answers]");
            for c in &ctx.candidates {
                let _ = write!(
                    text,
                    "\n{}. answer: {} | uncertainty: {} | summary: {}",
                    c.rank,
                    c.answer.trim(),
                    c.uncertainty,
                    c.summary.trim()
                );
            }
            text.push_str(
                "\n\n[Output Schema]\n{\"answer\": str, \"reasons\": [str], \"uncertainty\": \"low|medium|high\"}",
            );
        }
    }

    let image_refs = match kind {
        TemplateKind::MultiRoute | TemplateKind::Aggregate => ctx.image_refs.clone(),
        TemplateKind::PrincipleInit | TemplateKind::PrincipleEvolve => Vec::new(),
    };
    Ok(ChatRequest {
        messages: vec![ChatMessage { role: Role::User, text }],
        image_refs,
        temperature: sampling.temperature,
        max_tokens: sampling.max_tokens,
        seed,
    })
}

/// Best-effort recovery of the template kind from a rendered prompt.
pub fn detect_kind(text: &str) -> Option<TemplateKind> {
    [
        TemplateKind::PrincipleInit,
        TemplateKind::PrincipleEvolve,
        TemplateKind::MultiRoute,
        TemplateKind::Aggregate,
    ]
    .into_iter()
    .find(|k| text.starts_with(k.body()))
}
