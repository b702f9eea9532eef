//! Final decision after the last generation.

use serde::{Deserialize, Serialize};

use crate::client::{parse_structured, render_template, CandidateBrief, Sampling, TemplateContext, TemplateKind};
use crate::evolution::{select_elites, GenerationRecord};
use crate::level::OrdinalLevel;
use crate::routing::Task;
use crate::scheduler::Dispatcher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    #[default]
    Elite,
    Aggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Elite,
    Aggregated,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub reasons: Vec<String>,
    pub uncertainty: OrdinalLevel,
    pub provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub principle_id: Option<u64>,
}

/// Principle indices ordered best first, failed evaluations excluded.
fn ranked(record: &GenerationRecord) -> Vec<usize> {
    select_elites(&record.principles, &record.fitness, record.principles.len())
}

fn from_member(record: &GenerationRecord, i: usize, provenance: Provenance) -> FinalAnswer {
    let eval = record.evaluations[i].as_ref().expect("ranked members were evaluated");
    let rep = eval.representative();
    FinalAnswer {
        answer: rep.final_answer.clone(),
        reasons: rep.reasons.clone(),
        uncertainty: if provenance == Provenance::Fallback { OrdinalLevel::High } else { rep.uncertainty },
        provenance,
        principle_id: Some(record.principles[i].id),
    }
}

/// Representative of the best member whose answer matched the consensus
/// exactly; otherwise the best member overall. Uncertainty is always high.
pub fn fallback(record: &GenerationRecord) -> FinalAnswer {
    let order = ranked(record);
    let in_group = |&&i: &&usize| {
        record.criteria[i].is_some_and(|c| c.consensus == OrdinalLevel::High)
    };
    match order.iter().find(in_group).or(order.first()) {
        Some(&i) => from_member(record, i, Provenance::Fallback),
        None => FinalAnswer {
            answer: String::new(),
            reasons: Vec::new(),
            uncertainty: OrdinalLevel::High,
            provenance: Provenance::Fallback,
            principle_id: None,
        },
    }
}

/// Representative answer of the top-ranked elite.
pub fn decide_elite(record: &GenerationRecord) -> FinalAnswer {
    match ranked(record).first() {
        Some(&i) => from_member(record, i, Provenance::Elite),
        None => fallback(record),
    }
}

/// One aggregator call over the ranked representatives, re-sent once with the
/// corrective instruction if it does not parse. Any failure falls back.
/// Returns the answer and the number of requests issued.
pub async fn aggregate(
    record: &GenerationRecord,
    task: &Task,
    summary: &str,
    dispatcher: &Dispatcher,
    sampling: Sampling,
    seed: Option<u64>,
) -> (FinalAnswer, u64) {
    let candidates: Vec<CandidateBrief> = ranked(record)
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            let rep = record.evaluations[i].as_ref().expect("ranked members were evaluated").representative();
            CandidateBrief {
                rank: rank + 1,
                answer: rep.final_answer.clone(),
                summary: rep.summary.clone(),
                uncertainty: rep.uncertainty,
            }
        })
        .collect();
    let ctx = TemplateContext {
        prompt: task.prompt.clone(),
        summary: summary.to_string(),
        candidates,
        image_refs: task.image_sources.clone(),
        ..Default::default()
    };
    let Ok(mut req) = render_template(TemplateKind::Aggregate, &ctx, sampling, seed) else {
        return (fallback(record), 0);
    };
    let mut calls = 0;
    for attempt in 0..2 {
        if attempt == 1 {
            req = req.with_corrective_instruction();
        }
        calls += 1;
        let reply = match dispatcher.send(req.clone()).await {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(error = %e, "aggregation request failed");
                return (fallback(record), calls);
            }
        };
        match parse_structured(TemplateKind::Aggregate, &reply.content).map(|p| p.into_aggregate()) {
            Ok(Some(body)) if !body.answer.trim().is_empty() => {
                let answer = FinalAnswer {
                    answer: body.answer,
                    reasons: body.reasons,
                    uncertainty: body.uncertainty,
                    provenance: Provenance::Aggregated,
                    principle_id: None,
                };
                return (answer, calls);
            }
            Ok(_) => tracing::warn!("aggregation reply had no answer"),
            Err(e) => tracing::warn!(error = %e, "aggregation reply did not parse"),
        }
    }
    (fallback(record), calls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ChatBackend, ChatReply, ChatRequest, ClientError};
    use crate::evolution::{score_generation, EvolutionConfig, Principle};
    use crate::routing::{PrincipleEvaluation, Route};
    use async_trait::async_trait;
    use std::sync::{Arc, Mutex};
    use OrdinalLevel::*;

    fn eval(id: u64, answer: &str, unc: OrdinalLevel) -> PrincipleEvaluation {
        PrincipleEvaluation {
            principle_id: id,
            routes: vec![Route {
                final_answer: answer.into(),
                reasons: vec![format!("because {id}")],
                uncertainty: unc,
                placeholder: false,
                ..Route::placeholder()
            }],
            reported_diversity: Some(Low),
            representative_index: 0,
            short_batch: false,
            calls: 1,
            warnings: vec![],
        }
    }

    fn record(evals: Vec<Option<PrincipleEvaluation>>) -> GenerationRecord {
        let n = evals.len();
        let pop = (0..n as u64).map(|id| Principle { id, text: format!("p{id}"), birth_generation: 0 }).collect();
        score_generation(0, pop, evals, vec![false; n], &EvolutionConfig::default(), None)
    }

    #[test]
    fn elite_decision_projects_top_member() {
        let r = record(vec![Some(eval(0, "a", High)), Some(eval(1, "b", Low)), Some(eval(2, "b", Medium))]);
        let f = decide_elite(&r);
        assert_eq!((f.answer.as_str(), f.provenance, f.uncertainty), ("b", Provenance::Elite, Low));
        assert_eq!(f.principle_id, Some(1));
    }

    #[test]
    fn tied_elites_use_selection_order() {
        let r = record(vec![Some(eval(0, "x", Low)), Some(eval(1, "x", Low))]);
        assert_eq!(decide_elite(&r).principle_id, Some(r.elite_indices[0] as u64));
        assert_eq!(decide_elite(&r).principle_id, Some(0));
    }

    #[test]
    fn fallback_prefers_consensus_group() {
        // "b" wins the vote; all three tie on fitness, so principle 0 ranks first.
        let mut r = record(vec![Some(eval(0, "a", Low)), Some(eval(1, "b", High)), Some(eval(2, "b", High))]);
        let f = fallback(&r);
        assert_eq!((f.answer.as_str(), f.uncertainty, f.provenance), ("b", High, Provenance::Fallback));

        for c in r.criteria.iter_mut().flatten() {
            c.consensus = Low;
        }
        let f = fallback(&r);
        assert_eq!((f.answer.as_str(), f.uncertainty), ("a", High));
        assert_eq!(f.principle_id, Some(0));
    }

    #[test]
    fn all_failed_falls_back_to_empty() {
        let r = record(vec![None, None]);
        let f = decide_elite(&r);
        assert_eq!((f.answer.as_str(), f.uncertainty, f.provenance), ("", High, Provenance::Fallback));
        assert_eq!(fallback(&record(vec![])).answer, "");
    }

    struct Script(Mutex<Vec<Result<String, ()>>>);

    #[async_trait]
    impl ChatBackend for Script {
        async fn chat(&self, _: &ChatRequest) -> Result<ChatReply, ClientError> {
            match self.0.lock().unwrap().remove(0) {
                Ok(content) => Ok(ChatReply { content, usage: None }),
                Err(()) => Err(ClientError::Transport { attempts: 3, message: "timed out".into() }),
            }
        }
    }

    async fn run(script: Vec<Result<&str, ()>>) -> (FinalAnswer, u64) {
        let backend = Arc::new(Script(Mutex::new(script.into_iter().map(|r| r.map(String::from)).collect())));
        let dispatcher = Dispatcher::single(backend, 1).unwrap();
        let r = record(vec![Some(eval(0, "z", Low))]);
        let task = Task { prompt: "Q?".into(), image_sources: vec![] };
        aggregate(&r, &task, "", &dispatcher, Sampling { temperature: 0.0, max_tokens: 64 }, None).await
    }

    #[tokio::test]
    async fn aggregator_paths() {
        let (f, calls) = run(vec![Ok(r#"{"answer":"a","reasons":["r"],"uncertainty":"low"}"#)]).await;
        assert_eq!((f.answer.as_str(), f.provenance, calls), ("a", Provenance::Aggregated, 1));

        let (f, calls) = run(vec![Err(())]).await;
        assert_eq!((f.answer.as_str(), f.provenance, f.uncertainty, calls), ("z", Provenance::Fallback, High, 1));

        let (f, calls) = run(vec![Ok("nope"), Ok("{bad")]).await;
        assert_eq!((f.provenance, calls), (Provenance::Fallback, 2));

        let (f, calls) = run(vec![Ok("nope"), Ok(r#"{"answer":"c","reasons":[],"uncertainty":"medium"}"#)]).await;
        assert_eq!((f.answer.as_str(), f.provenance, calls), ("c", Provenance::Aggregated, 2));
    }
}
