//! End-to-end run: grounding summary, evolution, final decision, cost.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, decide_elite, fallback, Decision, FinalAnswer};
use crate::client::{ChatBackend, HttpBackend, HttpBackendConfig};
use crate::config::RunConfig;
use crate::evolution::{derive_seed, run_evolution, EvolutionContext, EvolutionError, GenerationRecord};
use crate::fitness::EquivalenceJudge;
use crate::grounding::{build_grounding_summary, GroundingSet};
use crate::mock::{MockBehavior, MockModel};
use crate::routing::Task;
use crate::scheduler::{CostReport, Dispatcher, Endpoint, SchedulerError};
use crate::simulation::SimulationReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub config: RunConfig,
    pub grounding_summary: String,
    pub generations: Vec<GenerationRecord>,
    pub final_answer: FinalAnswer,
    pub cost: CostReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RunHistory {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("history serializes");
        s.push('\n');
        s
    }
}

/// Token counts of every model-produced route, one evaluation per principle.
pub fn route_lengths(records: &[GenerationRecord]) -> Vec<u64> {
    let mut seen = BTreeMap::new();
    for r in records {
        for e in r.evaluations.iter().flatten() {
            seen.entry(e.principle_id).or_insert_with(|| {
                e.routes.iter().filter(|x| !x.placeholder).map(|x| x.tokens).collect::<Vec<_>>()
            });
        }
    }
    seen.into_values().flatten().collect()
}

/// Builds one endpoint per configured URL; `mock://` URLs use [`MockModel`].
pub fn build_dispatcher(cfg: &RunConfig) -> Result<Dispatcher, String> {
    let mut endpoints = Vec::new();
    for e in &cfg.endpoints {
        let backend: Arc<dyn ChatBackend> = if e.url.starts_with("mock://") {
            let behavior = MockBehavior::from_url(&e.url).ok_or_else(|| format!("unknown mock endpoint `{}`", e.url))?;
            Arc::new(MockModel::new(behavior))
        } else {
            Arc::new(HttpBackend::new(HttpBackendConfig::new(&e.url, &e.model)).map_err(|e| e.to_string())?)
        };
        endpoints.push(Endpoint::new(e.url.clone(), e.max_concurrency, backend));
    }
    Dispatcher::new(endpoints)
        .map(|d| d.with_serial(cfg.serial))
        .map_err(|e: SchedulerError| e.to_string())
}

pub async fn run_pipeline(
    cfg: &RunConfig,
    task: &Task,
    grounding: &GroundingSet,
    dispatcher: &Dispatcher,
    judge: Option<&(dyn EquivalenceJudge + Sync)>,
) -> Result<RunHistory, EvolutionError> {
    let summary = build_grounding_summary(grounding);
    let evo = cfg.evolution();
    let calls_before = dispatcher.calls();
    let ctx = EvolutionContext { dispatcher, task, grounding, summary: &summary, config: &evo, judge };
    let generations = run_evolution(&ctx).await?;
    let last = generations.last().expect("at least one generation");
    let final_answer = match cfg.decision {
        Decision::Elite => decide_elite(last),
        Decision::Aggregate if last.best_fitness.is_failed() => fallback(last),
        Decision::Aggregate => {
            let seed = Some(derive_seed(cfg.seed, 4, 0));
            aggregate(last, task, &summary, dispatcher, cfg.sampling.aggregate, seed).await.0
        }
    };
    let mut cost = CostReport::from_route_lengths((cfg.mu + cfg.lambda) as u64, cfg.tau as u64, &route_lengths(&generations));
    cost.model_calls = Some(dispatcher.calls() - calls_before);
    Ok(RunHistory {
        config: cfg.clone(),
        grounding_summary: summary,
        generations,
        final_answer,
        cost,
        simulation: None,
        warnings: Vec::new(),
    })
}
