//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Each check also has a wall-clock budget.

mod common;

use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sap_core::client::{ChatBackend, ChatMessage, ChatReply, ChatRequest, ClientError, Role};
use sap_core::config::RunConfig;
use sap_core::fitness::{compute_consensus, compute_fitness, CriterionSet, Fitness, FitnessWeights};
use sap_core::grounding::{assess_evidence_level, load_grounding_set, Citation, EvidenceRef};
use sap_core::level::OrdinalLevel::{self, High, Low, Medium};
use sap_core::mock::{MockBehavior, MockModel};
use sap_core::pipeline::run_pipeline;
use sap_core::routing::Task;
use sap_core::scheduler::{CostReport, Dispatcher};
use sap_core::simulation::{
    check_monotone_with, estimate_coverage_prob, estimate_improvement_prob, BoundReport, Selection, SynthSpace,
    TrialConfig,
};
use serde_json::Value;

type Outcome = Result<String, String>;

/// Weighted sum under unit weights, worked out by hand. Keys are levels of
/// consensus, diversity, evidence, uncertainty in that order.
const TABLE: [(&str, i64); 81] = [
    ("LLLL", 0), ("LLLM", -1), ("LLLH", -2),
    ("LLML", 1), ("LLMM", 0), ("LLMH", -1),
    ("LLHL", 2), ("LLHM", 1), ("LLHH", 0),
    ("LMLL", 1), ("LMLM", 0), ("LMLH", -1),
    ("LMML", 2), ("LMMM", 1), ("LMMH", 0),
    ("LMHL", 3), ("LMHM", 2), ("LMHH", 1),
    ("LHLL", 2), ("LHLM", 1), ("LHLH", 0),
    ("LHML", 3), ("LHMM", 2), ("LHMH", 1),
    ("LHHL", 4), ("LHHM", 3), ("LHHH", 2),
    ("MLLL", 1), ("MLLM", 0), ("MLLH", -1),
    ("MLML", 2), ("MLMM", 1), ("MLMH", 0),
    ("MLHL", 3), ("MLHM", 2), ("MLHH", 1),
    ("MMLL", 2), ("MMLM", 1), ("MMLH", 0),
    ("MMML", 3), ("MMMM", 2), ("MMMH", 1),
    ("MMHL", 4), ("MMHM", 3), ("MMHH", 2),
    ("MHLL", 3), ("MHLM", 2), ("MHLH", 1),
    ("MHML", 4), ("MHMM", 3), ("MHMH", 2),
    ("MHHL", 5), ("MHHM", 4), ("MHHH", 3),
    ("HLLL", 2), ("HLLM", 1), ("HLLH", 0),
    ("HLML", 3), ("HLMM", 2), ("HLMH", 1),
    ("HLHL", 4), ("HLHM", 3), ("HLHH", 2),
    ("HMLL", 3), ("HMLM", 2), ("HMLH", 1),
    ("HMML", 4), ("HMMM", 3), ("HMMH", 2),
    ("HMHL", 5), ("HMHM", 4), ("HMHH", 3),
    ("HHLL", 4), ("HHLM", 3), ("HHLH", 2),
    ("HHML", 5), ("HHMM", 4), ("HHMH", 3),
    ("HHHL", 6), ("HHHM", 5), ("HHHH", 4),
];

fn level(c: u8) -> OrdinalLevel {
    match c {
        b'L' => Low,
        b'M' => Medium,
        _ => High,
    }
}

fn fitness_table() -> Outcome {
    let w = FitnessWeights::default();
    let mut seen = std::collections::HashSet::new();
    for (key, want) in TABLE {
        let k = key.as_bytes();
        let crit = CriterionSet { consensus: level(k[0]), diversity: level(k[1]), evidence: level(k[2]), uncertainty: level(k[3]) };
        seen.insert(crit);
        let got = compute_fitness(&crit, &w);
        if got != Rational64::from_integer(want) {
            return Err(format!("{key}: got {got}, table says {want}"));
        }
        if !(-2..=6).contains(&want) {
            return Err(format!("{key}: {want} outside [-2, 6]"));
        }
    }
    if seen.len() != 81 {
        return Err(format!("table covers {} distinct combinations", seen.len()));
    }
    Ok("81/81 combinations match, range [-2, 6]".into())
}

fn monotone() -> Outcome {
    let space = SynthSpace::new(1 << 62, Rational64::new(1, 5)).map_err(|e| e.to_string())?;
    let cfg = TrialConfig { mu: 2, lambda: 2, generations: 10, trials: 1000, seed: 7 };
    let plus = check_monotone_with(&space, &cfg, Selection::Plus).map_err(|e| e.to_string())?;
    let comma = check_monotone_with(&space, &cfg, Selection::Comma).map_err(|e| e.to_string())?;
    if !plus.pass {
        return Err(format!("{} decreases in {} runs", plus.violations, plus.violating_trials));
    }
    if comma.pass {
        return Err("comma selection never decreased; the check cannot detect violations".into());
    }
    Ok(format!(
        "0 decreases over {} transitions; comma control shows {} decreases",
        plus.transitions, comma.violations
    ))
}

fn bound_line(r: &BoundReport) -> Outcome {
    let line = format!(
        "empirical {:.4} vs bound {:.4} ({}) +/- {:.4}",
        r.empirical_value, r.bound_value, r.theoretical_bound, r.tolerance
    );
    if r.within_tolerance { Ok(line) } else { Err(line) }
}

fn improvement() -> Outcome {
    let space = SynthSpace::new(1 << 62, Rational64::new(1, 5)).map_err(|e| e.to_string())?;
    let cfg = TrialConfig { mu: 2, lambda: 4, generations: 1, trials: 20_000, seed: 11 };
    let r = estimate_improvement_prob(&space, &cfg).map_err(|e| e.to_string())?;
    if r.theoretical_bound.to_string() != "369/625" {
        return Err(format!("bound {} is not 1 - 0.8^4", r.theoretical_bound));
    }
    bound_line(&r)
}

fn coverage() -> Outcome {
    let space = SynthSpace::new(1 << 62, Rational64::new(1, 20)).map_err(|e| e.to_string())?;
    let cfg = TrialConfig { mu: 2, lambda: 2, generations: 10, trials: 20_000, seed: 13 };
    let r = estimate_coverage_prob(&space, &cfg).map_err(|e| e.to_string())?;
    if (r.bound_value - (1.0 - 0.95f64.powi(20))).abs() > 1e-12 {
        return Err(format!("bound {} is not 1 - 0.95^20", r.theoretical_bound));
    }
    bound_line(&r)
}

fn consensus() -> Outcome {
    let reps = [(1, "A"), (2, "A"), (3, "A"), (4, "B")];
    let c = compute_consensus(&reps, None);
    let got = (c.consensus_answer.as_str(), c.winning_fraction, c.global_level, c.per_principle_match.clone());
    let want = ("a", Rational64::new(3, 4), High, vec![High, High, High, Low]);
    if got == want {
        Ok("answer a, fraction 3/4, level high, matches [high, high, high, low]".into())
    } else {
        Err(format!("got {got:?}"))
    }
}

fn random_label(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[char] = &['a', 'z', 'Q', ' ', '(', ')', '_', '#', '0', '9', 'é', '\n', '-', '.'];
    let n = rng.random_range(0..12);
    (0..n).map(|_| CHARS[rng.random_range(0..CHARS.len())]).collect()
}

fn evidence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let r = EvidenceRef {
            image_index: rng.random_range(1..=u32::MAX),
            object_index: rng.random_range(1..=u32::MAX),
            label: random_label(&mut rng),
        };
        let back: EvidenceRef = r.to_string().parse().map_err(|e| format!("{r:?}: {e}"))?;
        if back != r {
            return Err(format!("{r:?} came back as {back:?}"));
        }
    }
    let resolved = Citation::Resolved(EvidenceRef { image_index: 1, object_index: 1, label: "x".into() });
    let unresolved = Citation::Unresolved("?".into());
    for _ in 0..10_000 {
        let n = rng.random_range(0..16);
        let mut v: Vec<Citation> = (0..n)
            .map(|_| if rng.random_bool(0.5) { resolved.clone() } else { unresolved.clone() })
            .collect();
        let before = assess_evidence_level(&v);
        if let Some(i) = v.iter().position(|c| !c.is_resolved()) {
            v[i] = resolved.clone();
            let after = assess_evidence_level(&v);
            if after < before {
                return Err(format!("resolving one citation lowered {before:?} to {after:?}"));
            }
        }
    }
    Ok("10000 round-trips exact, 10000 monotone resolution steps".into())
}

fn run_binary(dir: &std::path::Path, out: &std::path::Path) -> Result<Vec<u8>, String> {
    let (task, manifest) = common::fixtures(dir);
    let status = Command::new(env!("CARGO_BIN_EXE_sap"))
        .args(["run", "--task"])
        .arg(&task)
        .arg("--manifest")
        .arg(&manifest)
        .args(["--endpoint", "mock://", "--out"])
        .arg(out)
        .env_remove("RUST_LOG")
        .status()
        .map_err(|e| e.to_string())?;
    if status.code() != Some(0) {
        return Err(format!("exit status {status}"));
    }
    std::fs::read(out).map_err(|e| e.to_string())
}

fn best(g: &Value) -> Result<Fitness, String> {
    serde_json::from_value(g["best_fitness"].clone()).map_err(|e| e.to_string())
}

fn end_to_end(rt: &tokio::runtime::Runtime) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run_binary(dir.path(), &dir.path().join("a.json"))?;
    let b = run_binary(dir.path(), &dir.path().join("b.json"))?;
    if a != b {
        return Err("two runs with the same seed differ".into());
    }
    let doc: Value = serde_json::from_slice(&a).map_err(|e| e.to_string())?;
    let errors = common::schema_errors(&doc);
    if !errors.is_empty() {
        return Err(format!("schema: {}", errors.join("; ")));
    }
    let gens = doc["generations"].as_array().ok_or("no generations")?;
    let (first, last) = (best(&gens[0])?, best(gens.last().unwrap())?);
    if last < first {
        return Err(format!("final best {last:?} below initial {first:?}"));
    }
    if doc["cost"]["model_calls"] != 8 {
        return Err(format!("binary reports {} model calls", doc["cost"]["model_calls"]));
    }

    let mock = Arc::new(MockModel::new(MockBehavior::Normal));
    let dispatcher = Dispatcher::single(mock.clone(), 4).map_err(|e| e.to_string())?;
    let gs = load_grounding_set(common::MANIFEST.as_bytes(), 32).map_err(|e| e.to_string())?;
    let task: Task = serde_json::from_str(common::TASK).map_err(|e| e.to_string())?;
    rt.block_on(run_pipeline(&RunConfig::default(), &task, &gs, &dispatcher, None)).map_err(|e| e.to_string())?;
    if mock.calls() != 8 {
        return Err(format!("mock served {} calls", mock.calls()));
    }
    let shown = |f: &Fitness| serde_json::to_string(f).unwrap_or_default();
    Ok(format!("exit 0, 8 calls, best {} -> {}, schema valid, byte-identical", shown(&first), shown(&last)))
}

fn cost() -> Outcome {
    let defaults = RunConfig::default();
    let routes = ((defaults.mu + defaults.lambda) * defaults.tau) as u64;
    let r = CostReport::from_mean(routes, 137);
    if r.ratio != "1/8" {
        return Err(format!("default ratio {}", r.ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..100 {
        let (mu, lambda, tau) = (rng.random_range(1..=16u64), rng.random_range(1..=16u64), rng.random_range(1..=8u64));
        let l = rng.random_range(1..=100_000u64);
        let r = CostReport::from_mean((mu + lambda) * tau, l);
        if r.sap_attention_cost * ((mu + lambda) * tau) as u128 != r.longcot_attention_cost {
            return Err(format!("identity fails for mu={mu} lambda={lambda} tau={tau} l={l}"));
        }
    }
    Ok("defaults give 1/8; identity holds on 100 random tuples".into())
}

/// Replies with its request tag after a random delay, tracking peak concurrency.
struct Latent {
    current: AtomicUsize,
    peak: AtomicUsize,
    delays: Vec<u64>,
}

#[async_trait]
impl ChatBackend for Latent {
    async fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ClientError> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let tag = req.user_text();
        let i: usize = tag.parse().unwrap();
        tokio::time::sleep(Duration::from_micros(self.delays[i])).await;
        self.current.fetch_sub(1, Ordering::SeqCst);
        Ok(ChatReply { content: tag, usage: None })
    }
}

fn scheduler(rt: &tokio::runtime::Runtime) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut peak = 0;
    for schedule in 0..100 {
        let delays = (0..16).map(|_| rng.random_range(0..3000)).collect();
        let backend = Arc::new(Latent { current: AtomicUsize::new(0), peak: AtomicUsize::new(0), delays });
        let dispatcher = Dispatcher::single(backend.clone(), 2).map_err(|e| e.to_string())?;
        let requests = (0..16)
            .map(|i| ChatRequest {
                messages: vec![ChatMessage { role: Role::User, text: i.to_string() }],
                image_refs: vec![],
                temperature: 0.0,
                max_tokens: 8,
                seed: None,
            })
            .collect();
        let replies = rt.block_on(dispatcher.dispatch(requests));
        for (i, r) in replies.into_iter().enumerate() {
            let content = r.map_err(|e| e.to_string())?.content;
            if content != i.to_string() {
                return Err(format!("schedule {schedule}: slot {i} holds reply {content}"));
            }
        }
        peak = peak.max(backend.peak.load(Ordering::SeqCst));
        if peak > 2 {
            return Err(format!("schedule {schedule}: {peak} requests in flight"));
        }
    }
    Ok(format!("peak in flight {peak}, 100 schedules order-aligned"))
}

fn main() {
    let rt = tokio::runtime::Runtime::new().expect("runtime");
    let checks: Vec<(&str, u64, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("fitness table", 1, Box::new(fitness_table)),
        ("monotone best fitness", 5, Box::new(monotone)),
        ("one-step improvement bound", 10, Box::new(improvement)),
        ("coverage bound", 30, Box::new(coverage)),
        ("consensus fixture", 1, Box::new(consensus)),
        ("evidence round-trip", 5, Box::new(evidence)),
        ("end-to-end mock run", 5, Box::new(|| end_to_end(&rt))),
        ("cost model", 1, Box::new(cost)),
        ("scheduler bound", 10, Box::new(|| scheduler(&rt))),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(d) if secs < *budget as f64 => (true, d),
            Ok(d) => (false, format!("{d}; took {secs:.2}s, budget {budget}s")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!("{} {}. {name}: {detail} [{secs:.2}s]", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    if failed > 0 {
        println!("{failed} of {} acceptance checks failed", checks.len());
        std::process::exit(1);
    }
    println!("all {} acceptance checks passed", checks.len());
}
