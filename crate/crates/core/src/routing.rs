//! Multi-route inference for a single principle and representative selection.

use serde::{Deserialize, Serialize};

use crate::client::{
    parse_structured, render_template, ChatReply, ChatRequest, ClientError, RenderError, RouteBody, Sampling,
    TemplateContext, TemplateKind,
};
use crate::grounding::{canonicalize_evidence, Citation, GroundingSet};
use crate::level::OrdinalLevel;
use crate::scheduler::Dispatcher;

/// The question and its images; image order defines `image_index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub prompt: String,
    #[serde(rename = "images")]
    pub image_sources: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchMode {
    /// One request asks for all routes of a principle.
    #[default]
    OneCall,
    /// One request per route.
    PerRoute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub reasoning: String,
    pub summary: String,
    pub final_answer: String,
    pub reasons: Vec<String>,
    pub uncertainty: OrdinalLevel,
    pub evidence_raw: Vec<String>,
    pub evidence_resolved: Vec<Citation>,
    /// Synthesized to fill a short batch; carries no model output.
    pub placeholder: bool,
    pub tokens: u64,
}

impl Route {
    pub fn placeholder() -> Route {
        Route {
            reasoning: String::new(),
            summary: String::new(),
            final_answer: String::new(),
            reasons: Vec::new(),
            uncertainty: OrdinalLevel::High,
            evidence_raw: Vec::new(),
            evidence_resolved: Vec::new(),
            placeholder: true,
            tokens: 0,
        }
    }

    fn from_body(body: RouteBody, gs: &GroundingSet, tokens: u64) -> Route {
        let evidence_resolved = canonicalize_evidence(&body.evidence, gs);
        Route {
            reasoning: body.reasoning,
            summary: body.summary,
            final_answer: body.final_answer,
            reasons: body.reasons,
            uncertainty: body.uncertainty,
            evidence_raw: body.evidence,
            evidence_resolved,
            placeholder: false,
            tokens,
        }
    }
}

/// Routes produced for one principle in one generation. `representative_index`
/// is zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrincipleEvaluation {
    pub principle_id: u64,
    pub routes: Vec<Route>,
    pub reported_diversity: Option<OrdinalLevel>,
    pub representative_index: usize,
    pub short_batch: bool,
    pub calls: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PrincipleEvaluation {
    pub fn representative(&self) -> &Route {
        &self.routes[self.representative_index]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RouteError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("principle {principle_id}: every route request failed ({last_error})")]
    AllRequestsFailed { principle_id: u64, last_error: String },
}

/// What the router needs to know about one principle to be evaluated.
#[derive(Debug, Clone)]
pub struct RouteJob {
    pub principle_id: u64,
    pub principle: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RouteSettings {
    pub tau: usize,
    pub mode: DispatchMode,
    pub sampling: Sampling,
}

/// Requests for one principle: a single request for `tau` routes, or `tau`
/// single-route requests.
pub fn route_requests(
    task: &Task,
    summary: &str,
    job: &RouteJob,
    settings: &RouteSettings,
) -> Result<Vec<ChatRequest>, RenderError> {
    let (n_requests, per_request) = match settings.mode {
        DispatchMode::OneCall => (1, settings.tau),
        DispatchMode::PerRoute => (settings.tau, 1),
    };
    let ctx = TemplateContext {
        prompt: task.prompt.clone(),
        summary: summary.to_string(),
        principle: Some(job.principle.clone()),
        count: per_request,
        image_refs: task.image_sources.clone(),
        ..Default::default()
    };
    (0..n_requests)
        .map(|i| {
            let seed = job.seed.map(|s| s.wrapping_add(i as u64));
            render_template(TemplateKind::MultiRoute, &ctx, settings.sampling, seed)
        })
        .collect()
}

/// Runs multi-route inference for every job in one dispatcher batch, with one
/// corrective re-send for replies that fail to parse. Results align with `jobs`.
pub async fn infer_routes_batch(
    dispatcher: &Dispatcher,
    task: &Task,
    summary: &str,
    gs: &GroundingSet,
    jobs: &[RouteJob],
    settings: &RouteSettings,
) -> Vec<Result<PrincipleEvaluation, RouteError>> {
    let mut requests = Vec::new();
    let mut owners = Vec::new();
    let mut render_errors = vec![None; jobs.len()];
    for (j, job) in jobs.iter().enumerate() {
        match route_requests(task, summary, job, settings) {
            Ok(reqs) => {
                owners.extend(std::iter::repeat_n(j, reqs.len()));
                requests.extend(reqs);
            }
            Err(e) => render_errors[j] = Some(e),
        }
    }

    let first = dispatcher.dispatch(requests.clone()).await;
    let mut outcomes: Vec<Outcome> = first.into_iter().map(Outcome::from_reply).collect();
    let retry: Vec<usize> = (0..outcomes.len())
        .filter(|&i| matches!(outcomes[i], Outcome::Unparsed(_)))
        .collect();
    let mut calls = vec![0u32; jobs.len()];
    for &j in &owners {
        calls[j] += 1;
    }
    if !retry.is_empty() {
        let resend: Vec<ChatRequest> = retry.iter().map(|&i| requests[i].with_corrective_instruction()).collect();
        let second = dispatcher.dispatch(resend).await;
        for (&i, reply) in retry.iter().zip(second) {
            calls[owners[i]] += 1;
            outcomes[i] = match Outcome::from_reply(reply) {
                Outcome::Unparsed(msg) => Outcome::Failed(msg),
                other => other,
            };
        }
    }

    let mut grouped: Vec<Vec<Outcome>> = (0..jobs.len()).map(|_| Vec::new()).collect();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        grouped[owners[i]].push(outcome);
    }
    jobs.iter()
        .zip(grouped)
        .zip(render_errors)
        .enumerate()
        .map(|(j, ((job, outcomes), render_error))| match render_error {
            Some(e) => Err(RouteError::Render(e)),
            None => assemble(job.principle_id, outcomes, settings.tau, gs, calls[j]),
        })
        .collect()
}

/// Single-principle convenience over [`infer_routes_batch`].
pub async fn infer_routes(
    dispatcher: &Dispatcher,
    task: &Task,
    summary: &str,
    gs: &GroundingSet,
    job: &RouteJob,
    settings: &RouteSettings,
) -> Result<PrincipleEvaluation, RouteError> {
    infer_routes_batch(dispatcher, task, summary, gs, std::slice::from_ref(job), settings)
        .await
        .pop()
        .expect("one result per job")
}

enum Outcome {
    Parsed { routes: Vec<RouteBody>, diversity: Option<crate::level::OrdinalLevel>, usage: Option<u64>, warnings: Vec<String> },
    Unparsed(String),
    Failed(String),
}

impl Outcome {
    fn from_reply(reply: Result<ChatReply, ClientError>) -> Outcome {
        match reply {
            Err(e) => Outcome::Failed(e.to_string()),
            Ok(reply) => match parse_structured(TemplateKind::MultiRoute, &reply.content) {
                Err(e) => Outcome::Unparsed(e.to_string()),
                Ok(payload) => {
                    let warnings = payload.warnings.clone();
                    let batch = payload.into_routes().expect("multi-route payload");
                    Outcome::Parsed {
                        routes: batch.routes,
                        diversity: batch.diversity,
                        usage: reply.usage.map(|u| u.completion_tokens),
                        warnings,
                    }
                }
            },
        }
    }
}

fn assemble(
    principle_id: u64,
    outcomes: Vec<Outcome>,
    tau: usize,
    gs: &GroundingSet,
    calls: u32,
) -> Result<PrincipleEvaluation, RouteError> {
    let single_request = outcomes.len() == 1;
    let mut routes = Vec::new();
    let mut reported_diversity = None;
    let mut warnings = Vec::new();
    let mut last_error = None;
    let mut any_parsed = false;
    for outcome in outcomes {
        match outcome {
            Outcome::Parsed { routes: bodies, diversity, usage, warnings: w } => {
                any_parsed = true;
                warnings.extend(w);
                if single_request {
                    reported_diversity = diversity;
                }
                let n = bodies.len().max(1) as u64;
                for (k, body) in bodies.into_iter().enumerate() {
                    let tokens = match usage {
                        Some(total) => total / n + u64::from((k as u64) < total % n),
                        None => whitespace_tokens(&body),
                    };
                    routes.push(Route::from_body(body, gs, tokens));
                }
            }
            Outcome::Unparsed(msg) | Outcome::Failed(msg) => last_error = Some(msg),
        }
    }
    if !any_parsed {
        return Err(RouteError::AllRequestsFailed {
            principle_id,
            last_error: last_error.unwrap_or_else(|| "no requests issued".into()),
        });
    }
    if let Some(err) = last_error {
        warnings.push(err);
    }
    routes.truncate(tau);
    let short_batch = routes.len() < tau;
    while routes.len() < tau {
        routes.push(Route::placeholder());
    }
    let representative_index = select_representative(&routes);
    Ok(PrincipleEvaluation {
        principle_id,
        routes,
        reported_diversity,
        representative_index,
        short_batch,
        calls,
        warnings,
    })
}

fn whitespace_tokens(body: &RouteBody) -> u64 {
    let count = |s: &str| s.split_whitespace().count() as u64;
    count(&body.reasoning)
        + count(&body.summary)
        + count(&body.final_answer)
        + body.reasons.iter().map(|r| count(r)).sum::<u64>()
}

/// Zero-based index of the representative route: lowest uncertainty among
/// routes with a nonempty answer, earliest on ties; the first route when no
/// route has an answer.
pub fn select_representative(routes: &[Route]) -> usize {
    routes
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.final_answer.trim().is_empty())
        .min_by_key(|(i, r)| (r.uncertainty, *i))
        .map(|(i, _)| i)
        .unwrap_or(0)
}
