//! Ordinal criteria and their scalar combination.
//!
//! Every criterion lives on the `low < medium < high` scale and maps to
//! `0, 1, 2`. Fitness is
//! `w_c·score(c) + w_d·score(d) + w_e·score(e) − w_u·pen(u)`, computed in
//! exact rational arithmetic so that ties between principles are real ties.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::level::OrdinalLevel;
use crate::rational;
use crate::routing::PrincipleEvaluation;

pub fn score(level: OrdinalLevel) -> i64 {
    match level {
        OrdinalLevel::Low => 0,
        OrdinalLevel::Medium => 1,
        OrdinalLevel::High => 2,
    }
}

/// Penalty mapping; same values as [`score`], subtracted in the fitness.
pub fn pen(level: OrdinalLevel) -> i64 {
    score(level)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CriterionSet {
    pub consensus: OrdinalLevel,
    pub diversity: OrdinalLevel,
    pub uncertainty: OrdinalLevel,
    pub evidence: OrdinalLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitnessWeights {
    #[serde(with = "rational::serde_str")]
    pub consensus: Rational64,
    #[serde(with = "rational::serde_str")]
    pub diversity: Rational64,
    #[serde(with = "rational::serde_str")]
    pub evidence: Rational64,
    #[serde(with = "rational::serde_str")]
    pub uncertainty: Rational64,
}

impl Default for FitnessWeights {
    fn default() -> Self {
        FitnessWeights::uniform(Rational64::from_integer(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fitness weight `{0}` must be nonnegative")]
pub struct NegativeWeight(pub &'static str);

impl FitnessWeights {
    pub fn uniform(w: Rational64) -> Self {
        FitnessWeights { consensus: w, diversity: w, evidence: w, uncertainty: w }
    }

    pub fn validate(&self) -> Result<(), NegativeWeight> {
        for (name, w) in [
            ("w_c", self.consensus),
            ("w_d", self.diversity),
            ("w_e", self.evidence),
            ("w_u", self.uncertainty),
        ] {
            if !rational::is_nonnegative(&w) {
                return Err(NegativeWeight(name));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: Rational64) -> Self {
        FitnessWeights {
            consensus: self.consensus * factor,
            diversity: self.diversity * factor,
            evidence: self.evidence * factor,
            uncertainty: self.uncertainty * factor,
        }
    }
}

pub fn compute_fitness(crit: &CriterionSet, w: &FitnessWeights) -> Rational64 {
    let r = |v: i64| Rational64::from_integer(v);
    w.consensus * r(score(crit.consensus)) + w.diversity * r(score(crit.diversity)) + w.evidence * r(score(crit.evidence))
        - w.uncertainty * r(pen(crit.uncertainty))
}

/// Fitness of a principle; a failed evaluation ranks below every value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fitness {
    Failed,
    Value(Rational64),
}

impl Fitness {
    pub fn value(&self) -> Option<Rational64> {
        match self {
            Fitness::Failed => None,
            Fitness::Value(v) => Some(*v),
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, Fitness::Failed)
    }
}

impl Ord for Fitness {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Fitness::Failed, Fitness::Failed) => Ordering::Equal,
            (Fitness::Failed, _) => Ordering::Less,
            (_, Fitness::Failed) => Ordering::Greater,
            (Fitness::Value(a), Fitness::Value(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for Fitness {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Fitness::Failed => s.serialize_none(),
            Fitness::Value(v) => s.serialize_str(&rational::format_rational(v)),
        }
    }
}

impl<'de> Deserialize<'de> for Fitness {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Option::<String>::deserialize(d)? {
            None => Ok(Fitness::Failed),
            Some(raw) => rational::parse_rational(&raw)
                .map(Fitness::Value)
                .map_err(serde::de::Error::custom),
        }
    }
}

/// Trim, lowercase, collapse whitespace, drop trailing `. , ! ?`.
pub fn normalize_answer(raw: &str) -> String {
    let collapsed = raw.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', ',', '!', '?'])
        .trim_end()
        .to_string()
}

/// Decides whether two normalized answers mean the same thing.
pub trait EquivalenceJudge {
    fn equivalent(&self, answer: &str, consensus: &str) -> bool;
}

impl<F: Fn(&str, &str) -> bool> EquivalenceJudge for F {
    fn equivalent(&self, answer: &str, consensus: &str) -> bool {
        self(answer, consensus)
    }
}

/// Offline stand-in for a model-judged equivalence: token-set Jaccard ≥ 0.8.
pub fn token_jaccard_match(a: &str, b: &str) -> bool {
    let ta: HashSet<&str> = a.split_whitespace().collect();
    let tb: HashSet<&str> = b.split_whitespace().collect();
    let union = ta.union(&tb).count();
    if union == 0 {
        return false;
    }
    let inter = ta.intersection(&tb).count();
    5 * inter >= 4 * union
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub consensus_answer: String,
    pub winning_count: usize,
    pub population: usize,
    #[serde(with = "rational::serde_str")]
    pub winning_fraction: Rational64,
    pub global_level: OrdinalLevel,
    pub principle_ids: Vec<u64>,
    pub per_principle_match: Vec<OrdinalLevel>,
}

impl ConsensusResult {
    pub fn match_for(&self, principle_id: u64) -> Option<OrdinalLevel> {
        self.principle_ids
            .iter()
            .position(|&id| id == principle_id)
            .map(|i| self.per_principle_match[i])
    }
}

/// Majority vote over representative answers.
///
/// The modal normalized answer wins (lexicographically smallest on ties; empty
/// answers only win when nothing else was answered). Global level: fraction
/// ≥ 2/3 high, ≥ 1/2 medium, else low, and low when the winner is empty.
/// Per principle: exact match high, judged (or Jaccard) match medium, else low.
///
/// Panics if `representatives` is empty.
pub fn compute_consensus(
    representatives: &[(u64, &str)],
    judge: Option<&dyn EquivalenceJudge>,
) -> ConsensusResult {
    assert!(!representatives.is_empty(), "consensus needs at least one representative");
    let normalized: Vec<String> = representatives.iter().map(|(_, a)| normalize_answer(a)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in &normalized {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let nonempty_best = counts
        .iter()
        .filter(|(a, _)| !a.is_empty())
        // BTreeMap iterates in lexicographic order; keep the first maximum.
        .fold(None::<(&str, usize)>, |best, (&a, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((a, c)),
        });
    let (winner, winning_count) = nonempty_best.unwrap_or(("", counts.get("").copied().unwrap_or(0)));
    let winner = winner.to_string();
    let population = representatives.len();
    let global_level = if winner.is_empty() {
        OrdinalLevel::Low
    } else if 3 * winning_count >= 2 * population {
        OrdinalLevel::High
    } else if 2 * winning_count >= population {
        OrdinalLevel::Medium
    } else {
        OrdinalLevel::Low
    };
    let per_principle_match = normalized
        .iter()
        .map(|a| {
            if a.is_empty() || winner.is_empty() {
                OrdinalLevel::Low
            } else if *a == winner {
                OrdinalLevel::High
            } else {
                let similar = match judge {
                    Some(j) => j.equivalent(a, &winner),
                    None => token_jaccard_match(a, &winner),
                };
                if similar {
                    OrdinalLevel::Medium
                } else {
                    OrdinalLevel::Low
                }
            }
        })
        .collect();
    ConsensusResult {
        consensus_answer: winner,
        winning_count,
        population,
        winning_fraction: Rational64::new(winning_count as i64, population as i64),
        global_level,
        principle_ids: representatives.iter().map(|(id, _)| *id).collect(),
        per_principle_match,
    }
}

/// Uses the diversity the model reported; otherwise counts distinct
/// normalized answers: one distinct answer is low, all distinct is high.
pub fn assess_diversity(eval: &PrincipleEvaluation) -> OrdinalLevel {
    if let Some(level) = eval.reported_diversity {
        return level;
    }
    let distinct: HashSet<String> = eval.routes.iter().map(|r| normalize_answer(&r.final_answer)).collect();
    if distinct.len() <= 1 {
        OrdinalLevel::Low
    } else if distinct.len() == eval.routes.len() {
        OrdinalLevel::High
    } else {
        OrdinalLevel::Medium
    }
}
