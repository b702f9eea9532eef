//! (μ+λ) search over textual principles.
//!
//! Generation 0 samples μ+λ principles in one batch call. Every later
//! generation keeps the top-μ elites and asks the model for λ offspring
//! conditioned on the elites' ordinal criteria. `generations` counts evaluated
//! generations, so the history holds `max(generations, 1)` records.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::client::{
    parse_structured, render_template, ChatRequest, EliteBrief, Sampling, TemplateContext, TemplateKind,
};
use crate::fitness::{
    assess_diversity, compute_consensus, compute_fitness, normalize_answer, ConsensusResult, CriterionSet,
    EquivalenceJudge, Fitness, FitnessWeights,
};
use crate::grounding::{assess_evidence_level, Citation, GroundingSet};
use crate::level::OrdinalLevel;
use crate::routing::{infer_routes_batch, DispatchMode, PrincipleEvaluation, RouteJob, RouteSettings, Task};
use crate::scheduler::Dispatcher;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principle {
    pub id: u64,
    pub text: String,
    pub birth_generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSampling {
    pub init: Sampling,
    pub evolve: Sampling,
    pub route: Sampling,
    pub aggregate: Sampling,
}

impl Default for StageSampling {
    fn default() -> Self {
        StageSampling {
            init: Sampling { temperature: 0.7, max_tokens: 1024 },
            evolve: Sampling { temperature: 0.7, max_tokens: 1024 },
            route: Sampling { temperature: 0.7, max_tokens: 2048 },
            aggregate: Sampling { temperature: 0.0, max_tokens: 1024 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub mu: usize,
    pub lambda: usize,
    pub tau: usize,
    pub generations: usize,
    pub weights: FitnessWeights,
    pub dispatch_mode: DispatchMode,
    pub route_cache: bool,
    pub seed: u64,
    pub sampling: StageSampling,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            mu: 2,
            lambda: 2,
            tau: 2,
            generations: 2,
            weights: FitnessWeights::default(),
            dispatch_mode: DispatchMode::OneCall,
            route_cache: true,
            seed: 0,
            sampling: StageSampling::default(),
        }
    }
}

impl EvolutionConfig {
    pub fn population_size(&self) -> usize {
        self.mu + self.lambda
    }

    /// Field name and reason for the first invalid setting.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda), ("tau", self.tau)] {
            if v == 0 {
                return Err((name, "must be at least 1".into()));
            }
        }
        self.weights.validate().map_err(|e| ("weights", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvolutionError {
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("invalid evolution config: `{0}` {1}")]
    Config(&'static str, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u32,
    pub principles: Vec<Principle>,
    /// `None` where every route request for the principle failed.
    pub evaluations: Vec<Option<PrincipleEvaluation>>,
    pub cached: Vec<bool>,
    pub criteria: Vec<Option<CriterionSet>>,
    pub fitness: Vec<Fitness>,
    pub best_fitness: Fitness,
    pub elite_indices: Vec<usize>,
    pub consensus: Option<ConsensusResult>,
    /// Requests issued while producing this generation (sampling and routes).
    pub model_calls: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl GenerationRecord {
    pub fn elites(&self) -> impl Iterator<Item = &Principle> {
        self.elite_indices.iter().map(|&i| &self.principles[i])
    }
}

/// Everything a generation needs besides the population itself.
pub struct EvolutionContext<'a> {
    pub dispatcher: &'a Dispatcher,
    pub task: &'a Task,
    pub grounding: &'a GroundingSet,
    pub summary: &'a str,
    pub config: &'a EvolutionConfig,
    pub judge: Option<&'a (dyn EquivalenceJudge + Sync)>,
}

/// SplitMix64 finalizer over (seed, a, b); used for request seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn principle_key(text: &str) -> String {
    normalize_answer(text)
}

/// Sampled texts plus what it cost to get them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleOutcome {
    pub texts: Vec<String>,
    pub calls: u64,
    pub padded: usize,
    pub warnings: Vec<String>,
}

/// One batch request for `n` texts, one re-request for the remainder (with the
/// corrective instruction when the first reply did not parse), then padding by
/// duplicating what was sampled. Texts whose normalized form is in `exclude`
/// or repeats an earlier one are dropped.
async fn sample_principles(
    dispatcher: &Dispatcher,
    kind: TemplateKind,
    base: &TemplateContext,
    n: usize,
    exclude: &HashSet<String>,
    sampling: Sampling,
    seed: u64,
) -> Result<SampleOutcome, String> {
    let mut out = SampleOutcome::default();
    let mut seen = exclude.clone();
    let mut parse_failed = false;
    let mut last_error = String::from("no reply");
    for attempt in 0..2u64 {
        let remaining = n - out.texts.len();
        if remaining == 0 {
            break;
        }
        let ctx = TemplateContext { count: remaining, ..base.clone() };
        let mut req: ChatRequest =
            render_template(kind, &ctx, sampling, Some(seed.wrapping_add(attempt))).map_err(|e| e.to_string())?;
        if parse_failed {
            req = req.with_corrective_instruction();
        }
        out.calls += 1;
        parse_failed = false;
        let reply = match dispatcher.send(req).await {
            Ok(r) => r,
            Err(e) => {
                last_error = e.to_string();
                out.warnings.push(format!("{kind:?} request failed: {e}"));
                continue;
            }
        };
        let batch = match parse_structured(kind, &reply.content) {
            Ok(p) => {
                out.warnings.extend(p.warnings.iter().cloned());
                p.into_principles().map(|b| b.principles).unwrap_or_default()
            }
            Err(e) => {
                parse_failed = true;
                last_error = e.to_string();
                out.warnings.push(e.to_string());
                continue;
            }
        };
        for text in batch {
            let text = text.trim().to_string();
            if text.is_empty() || out.texts.len() == n {
                continue;
            }
            if seen.insert(principle_key(&text)) {
                out.texts.push(text);
            }
        }
    }
    if out.texts.is_empty() {
        return Err(last_error);
    }
    out.padded = pad_texts(&mut out.texts, n, &mut seen);
    if out.padded > 0 {
        out.warnings.push(format!("padded {} principle(s) by duplication", out.padded));
    }
    Ok(out)
}

/// Appends `" (variant k)"` copies of existing texts until `n` are present.
fn pad_texts(texts: &mut Vec<String>, n: usize, seen: &mut HashSet<String>) -> usize {
    let originals = texts.clone();
    let mut added = 0;
    let mut k = 2;
    while texts.len() < n {
        for base in &originals {
            if texts.len() == n {
                break;
            }
            let candidate = format!("{base} (variant {k})");
            if seen.insert(principle_key(&candidate)) {
                texts.push(candidate);
                added += 1;
            }
        }
        k += 1;
    }
    added
}

fn assign(texts: Vec<String>, generation: u32, next_id: &mut u64) -> Vec<Principle> {
    texts
        .into_iter()
        .map(|text| {
            let id = *next_id;
            *next_id += 1;
            Principle { id, text, birth_generation: generation }
        })
        .collect()
}

fn base_context(ctx: &EvolutionContext<'_>) -> TemplateContext {
    TemplateContext {
        prompt: ctx.task.prompt.clone(),
        summary: ctx.summary.to_string(),
        ..Default::default()
    }
}

/// Samples `n` principles for generation `generation` from the task alone.
pub async fn init_population(
    ctx: &EvolutionContext<'_>,
    n: usize,
    generation: u32,
    next_id: &mut u64,
) -> Result<(Vec<Principle>, SampleOutcome), EvolutionError> {
    if n == 0 {
        return Err(EvolutionError::Config("mu", "population must not be empty".into()));
    }
    let seed = derive_seed(ctx.config.seed, 1, generation as u64);
    let outcome = sample_principles(
        ctx.dispatcher,
        TemplateKind::PrincipleInit,
        &base_context(ctx),
        n,
        &HashSet::new(),
        ctx.config.sampling.init,
        seed,
    )
    .await
    .map_err(EvolutionError::Init)?;
    let principles = assign(outcome.texts.clone(), generation, next_id);
    Ok((principles, outcome))
}

/// Asks for `lambda` new principles given ranked elites and their criteria.
/// Offspring never repeat an elite text or each other after normalization.
pub async fn propose_offspring(
    ctx: &EvolutionContext<'_>,
    elites: &[(Principle, CriterionSet)],
    lambda: usize,
    generation: u32,
    next_id: &mut u64,
) -> Result<(Vec<Principle>, SampleOutcome), EvolutionError> {
    if elites.is_empty() || lambda == 0 {
        return Err(EvolutionError::Config("lambda", "offspring need elites and λ ≥ 1".into()));
    }
    let base = TemplateContext {
        elites: elites
            .iter()
            .enumerate()
            .map(|(rank, (p, c))| EliteBrief { rank: rank + 1, text: p.text.clone(), criteria: *c })
            .collect(),
        ..base_context(ctx)
    };
    let exclude: HashSet<String> = elites.iter().map(|(p, _)| principle_key(&p.text)).collect();
    let seed = derive_seed(ctx.config.seed, 2, generation as u64);
    let outcome = sample_principles(
        ctx.dispatcher,
        TemplateKind::PrincipleEvolve,
        &base,
        lambda,
        &exclude,
        ctx.config.sampling.evolve,
        seed,
    )
    .await
    .map_err(EvolutionError::Init)?;
    let principles = assign(outcome.texts.clone(), generation, next_id);
    Ok((principles, outcome))
}

/// Indices of the top-`mu` finite fitness values; ties go to the earlier
/// birth generation, then the smaller id. Failed evaluations are never elite.
pub fn select_elites(principles: &[Principle], fitness: &[Fitness], mu: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..principles.len()).filter(|&i| !fitness[i].is_failed()).collect();
    order.sort_by(|&a, &b| {
        fitness[b]
            .cmp(&fitness[a])
            .then(principles[a].birth_generation.cmp(&principles[b].birth_generation))
            .then(principles[a].id.cmp(&principles[b].id))
    });
    order.truncate(mu);
    order
}

/// Citations pooled over every model-produced route of a principle.
fn evidence_level(eval: &PrincipleEvaluation) -> OrdinalLevel {
    let pooled: Vec<Citation> = eval
        .routes
        .iter()
        .filter(|r| !r.placeholder)
        .flat_map(|r| r.evidence_resolved.iter().cloned())
        .collect();
    assess_evidence_level(&pooled)
}

/// Scores an already-evaluated population: consensus over representatives,
/// criteria, fitness and elites. No model calls.
pub fn score_generation(
    generation: u32,
    principles: Vec<Principle>,
    evaluations: Vec<Option<PrincipleEvaluation>>,
    cached: Vec<bool>,
    config: &EvolutionConfig,
    judge: Option<&(dyn EquivalenceJudge + Sync)>,
) -> GenerationRecord {
    let reps: Vec<(u64, &str)> = evaluations
        .iter()
        .flatten()
        .map(|e| (e.principle_id, e.representative().final_answer.as_str()))
        .collect();
    let consensus = if reps.is_empty() {
        None
    } else {
        Some(compute_consensus(&reps, judge.map(|j| j as &dyn EquivalenceJudge)))
    };
    let criteria: Vec<Option<CriterionSet>> = evaluations
        .iter()
        .map(|e| {
            let e = e.as_ref()?;
            let consensus = consensus.as_ref()?.match_for(e.principle_id)?;
            Some(CriterionSet {
                consensus,
                diversity: assess_diversity(e),
                uncertainty: e.representative().uncertainty,
                evidence: evidence_level(e),
            })
        })
        .collect();
    let fitness: Vec<Fitness> = criteria
        .iter()
        .map(|c| match c {
            Some(c) => Fitness::Value(compute_fitness(c, &config.weights)),
            None => Fitness::Failed,
        })
        .collect();
    let best_fitness = fitness.iter().copied().max().unwrap_or(Fitness::Failed);
    let elite_indices = select_elites(&principles, &fitness, config.mu);
    GenerationRecord {
        generation,
        principles,
        evaluations,
        cached,
        criteria,
        fitness,
        best_fitness,
        elite_indices,
        consensus,
        model_calls: 0,
        warnings: Vec::new(),
    }
}

/// Runs routes for every principle without a cached evaluation, then scores
/// the whole population against this generation's consensus.
pub async fn evaluate_generation(
    ctx: &EvolutionContext<'_>,
    generation: u32,
    principles: Vec<Principle>,
    cache: &mut HashMap<u64, PrincipleEvaluation>,
) -> GenerationRecord {
    let config = ctx.config;
    let calls_before = ctx.dispatcher.calls();
    let mut evaluations: Vec<Option<PrincipleEvaluation>> = vec![None; principles.len()];
    let mut cached = vec![false; principles.len()];
    let mut jobs = Vec::new();
    let mut slots = Vec::new();
    for (i, p) in principles.iter().enumerate() {
        if let Some(hit) = cache.get(&p.id).filter(|_| config.route_cache) {
            evaluations[i] = Some(hit.clone());
            cached[i] = true;
        } else {
            jobs.push(RouteJob {
                principle_id: p.id,
                principle: p.text.clone(),
                seed: Some(derive_seed(config.seed, 3, p.id ^ ((generation as u64) << 32))),
            });
            slots.push(i);
        }
    }
    let settings = RouteSettings { tau: config.tau, mode: config.dispatch_mode, sampling: config.sampling.route };
    let results = infer_routes_batch(ctx.dispatcher, ctx.task, ctx.summary, ctx.grounding, &jobs, &settings).await;
    let mut warnings = Vec::new();
    for (slot, result) in slots.into_iter().zip(results) {
        match result {
            Ok(eval) => {
                if config.route_cache {
                    cache.insert(eval.principle_id, eval.clone());
                }
                evaluations[slot] = Some(eval);
            }
            Err(e) => {
                tracing::warn!(principle = principles[slot].id, error = %e, "principle evaluation failed");
                warnings.push(e.to_string());
            }
        }
    }
    let mut record = score_generation(generation, principles, evaluations, cached, config, ctx.judge);
    record.model_calls = ctx.dispatcher.calls() - calls_before;
    record.warnings = warnings;
    record
}

/// Full search. Returns every generation record in order.
pub async fn run_evolution(ctx: &EvolutionContext<'_>) -> Result<Vec<GenerationRecord>, EvolutionError> {
    let config = ctx.config;
    config.validate().map_err(|(f, m)| EvolutionError::Config(f, m))?;
    let n = config.population_size();
    let rounds = config.generations.max(1);
    let mut next_id = 0u64;
    let mut cache = HashMap::new();
    let mut records: Vec<GenerationRecord> = Vec::with_capacity(rounds);

    for g in 0..rounds as u32 {
        let calls_before = ctx.dispatcher.calls();
        let mut notes = Vec::new();
        let population = match records.last() {
            None => {
                let (pop, outcome) = init_population(ctx, n, 0, &mut next_id).await?;
                notes.extend(outcome.warnings);
                pop
            }
            Some(prev) => {
                let elites: Vec<(Principle, CriterionSet)> = prev
                    .elite_indices
                    .iter()
                    .map(|&i| (prev.principles[i].clone(), prev.criteria[i].expect("elites have criteria")))
                    .collect();
                let mut pop: Vec<Principle> = elites.iter().map(|(p, _)| p.clone()).collect();
                let wanted = n - pop.len();
                if elites.is_empty() {
                    notes.push("no principle evaluated successfully; resampling the population".into());
                    let (fresh, outcome) = init_population(ctx, wanted, g, &mut next_id).await?;
                    notes.extend(outcome.warnings);
                    pop.extend(fresh);
                } else {
                    match propose_offspring(ctx, &elites, wanted, g, &mut next_id).await {
                        Ok((offspring, outcome)) => {
                            notes.extend(outcome.warnings);
                            pop.extend(offspring);
                        }
                        Err(e) => {
                            notes.push(format!("offspring sampling failed ({e}); padding from elites"));
                            let mut seen: HashSet<String> =
                                elites.iter().map(|(p, _)| principle_key(&p.text)).collect();
                            let mut texts: Vec<String> = elites.iter().map(|(p, _)| p.text.clone()).collect();
                            pad_texts(&mut texts, elites.len() + wanted, &mut seen);
                            pop.extend(assign(texts.split_off(elites.len()), g, &mut next_id));
                        }
                    }
                }
                pop
            }
        };
        let mut record = evaluate_generation(ctx, g, population, &mut cache).await;
        record.model_calls = ctx.dispatcher.calls() - calls_before;
        notes.append(&mut record.warnings);
        record.warnings = notes;
        if let Some(prev) = records.last() {
            if record.best_fitness < prev.best_fitness {
                let msg = format!(
                    "best fitness decreased from {} to {}",
                    fitness_label(prev.best_fitness),
                    fitness_label(record.best_fitness)
                );
                tracing::warn!(generation = g, "{msg}");
                record.warnings.push(msg);
            }
        }
        records.push(record);
    }
    Ok(records)
}

fn fitness_label(f: Fitness) -> String {
    match f {
        Fitness::Failed => "failed".into(),
        Fitness::Value(v) => crate::rational::format_rational(&v),
    }
}
