//! Deterministic offline model, selectable with `--endpoint mock://`.
//!
//! Replies depend only on the request text. Every principle answers the same
//! question the same way, so consensus is unanimous and a principle's fitness
//! depends on its own text alone.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};

use async_trait::async_trait;
use regex::Regex;
use serde_json::json;

use crate::client::{detect_kind, ChatBackend, ChatReply, ChatRequest, ClientError, TemplateKind, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockBehavior {
    #[default]
    Normal,
    /// Route requests fail; sampling and aggregation still answer.
    FailRoutes,
    /// Every request fails.
    FailAll,
}

impl MockBehavior {
    /// `mock://`, `mock://fail-routes`, `mock://fail-all`.
    pub fn from_url(url: &str) -> Option<MockBehavior> {
        match url.strip_prefix("mock://")?.trim_end_matches('/') {
            "" | "default" => Some(MockBehavior::Normal),
            "fail-routes" => Some(MockBehavior::FailRoutes),
            "fail-all" => Some(MockBehavior::FailAll),
            _ => None,
        }
    }
}

#[derive(Debug, Default)]
pub struct MockModel {
    behavior: MockBehavior,
    calls: AtomicU64,
    by_kind: Mutex<HashMap<TemplateKind, u64>>,
}

const ANSWERS: [&str; 4] = ["a", "b", "c", "d"];
const LEVELS: [&str; 3] = ["low", "medium", "high"];
const FOCI: [&str; 8] = [
    "name the objects that the question depends on before answering",
    "check each candidate answer against the grounded objects",
    "count visible instances one image at a time",
    "compare spatial relations between the two most relevant objects",
    "rule out answers that need details not present in the image",
    "state what would change the answer and check for it",
    "read attributes such as color and size directly from the objects",
    "prefer the simplest reading of the question that fits the evidence",
];

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn regexes() -> &'static [Regex; 4] {
    static RE: OnceLock<[Regex; 4]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"Return exactly (\d+) (?:new )?principles").unwrap(),
            Regex::new(r"Produce exactly (\d+) route").unwrap(),
            Regex::new(r"(?m)^img#(\d+): \d+x\d+, (\d+) objects$").unwrap(),
            Regex::new(r"(?m)^\d+\. answer: (.*?) \|").unwrap(),
        ]
    })
}

fn section<'a>(text: &'a str, header: &str) -> &'a str {
    let Some(start) = text.find(header) else { return "" };
    let rest = &text[start + header.len()..];
    rest.split("\n\n[").next().unwrap_or("").trim()
}

fn count(re: &Regex, text: &str) -> usize {
    re.captures(text).and_then(|c| c[1].parse().ok()).unwrap_or(1)
}

impl MockModel {
    pub fn new(behavior: MockBehavior) -> MockModel {
        MockModel { behavior, ..Default::default() }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn calls_of(&self, kind: TemplateKind) -> u64 {
        self.by_kind.lock().unwrap().get(&kind).copied().unwrap_or(0)
    }

    fn principles(text: &str, n: usize, salt: &str) -> String {
        let base = fnv1a(&format!("{salt}|{}", section(text, "[Question]")));
        let list: Vec<String> = (0..n)
            .map(|i| {
                let h = base.wrapping_add(i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                format!("{} (focus {:04x})", FOCI[(h >> 60) as usize % FOCI.len()], h & 0xffff)
            })
            .collect();
        json!({ "principles": list }).to_string()
    }

    fn routes(text: &str) -> String {
        let question = section(text, "[Question]");
        let principle = section(text, "[Active Principle]");
        let tau = count(&regexes()[1], text);
        let h = fnv1a(principle);
        let answer = ANSWERS[(fnv1a(question) % ANSWERS.len() as u64) as usize];
        let objects: Vec<(u64, u64)> = regexes()[2]
            .captures_iter(section(text, "[Grounding Summary]"))
            .filter_map(|c| Some((c[1].parse().ok()?, c[2].parse().ok()?)))
            .collect();
        let routes: Vec<_> = (0..tau as u64)
            .map(|r| {
                let hr = h.rotate_left(7 * r as u32 + 3);
                let evidence: Vec<String> = match objects.iter().find(|(_, m)| *m > 0) {
                    // Cite a valid object, and sometimes one that does not exist.
                    Some(&(k, m)) => {
                        let mut ev = vec![format!("img#{k}_obj#{}(object)", 1 + hr % m)];
                        if hr % 3 == 0 {
                            ev.push(format!("img#{k}_obj#{}(missing)", m + 1));
                        }
                        ev
                    }
                    None => vec![],
                };
                json!({
                    "final_answer": answer,
                    "reasons": [format!("route {} follows the principle", r + 1)],
                    "uncertainty": LEVELS[(h % 3) as usize],
                    "evidence": evidence,
                    "reasoning": format!("Applying the principle to the question yields {answer}."),
                    "summary": format!("answer {answer}"),
                })
            })
            .collect();
        json!({ "routes": routes, "diversity": LEVELS[((h >> 8) % 3) as usize] }).to_string()
    }

    fn aggregate(text: &str) -> String {
        let answer = regexes()[3].captures(text).map(|c| c[1].to_string()).unwrap_or_default();
        json!({ "answer": answer, "reasons": ["highest ranked candidate"], "uncertainty": "low" }).to_string()
    }
}

#[async_trait]
impl ChatBackend for MockModel {
    async fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = req.user_text();
        let kind = detect_kind(&text).ok_or_else(|| ClientError::Malformed("mock: unknown template".into()))?;
        *self.by_kind.lock().unwrap().entry(kind).or_default() += 1;
        let fail = match self.behavior {
            MockBehavior::Normal => false,
            MockBehavior::FailRoutes => kind == TemplateKind::MultiRoute,
            MockBehavior::FailAll => true,
        };
        if fail {
            return Err(ClientError::Status { status: 503, attempts: 1, body: "mock failure".into() });
        }
        let content = match kind {
            TemplateKind::PrincipleInit => MockModel::principles(&text, count(&regexes()[0], &text), "init"),
            TemplateKind::PrincipleEvolve => {
                MockModel::principles(&text, count(&regexes()[0], &text), section(&text, "[Elite Principles]"))
            }
            TemplateKind::MultiRoute => MockModel::routes(&text),
            TemplateKind::Aggregate => MockModel::aggregate(&text),
        };
        let usage = Usage {
            prompt_tokens: text.split_whitespace().count() as u64,
            completion_tokens: content.split_whitespace().count() as u64,
        };
        Ok(ChatReply { content, usage: Some(usage) })
    }
}
