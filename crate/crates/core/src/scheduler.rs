//! Bounded-concurrency request dispatch across endpoints, plus the analytic
//! attention-cost comparison between parallel short routes and one long chain.
//!
//! The dispatcher is the only place in the crate that runs model requests
//! concurrently. Callers hand it a batch and get back one result per request,
//! in request order, whatever order the endpoints answered in.

use std::future::Future;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use futures::stream::{FuturesUnordered, StreamExt};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::client::{ChatBackend, ChatReply, ChatRequest, ClientError};

/// One endpoint the dispatcher can route to.
#[derive(Clone)]
pub struct Endpoint {
    pub name: String,
    pub max_concurrency: usize,
    pub backend: Arc<dyn ChatBackend>,
}

impl Endpoint {
    pub fn new(name: impl Into<String>, max_concurrency: usize, backend: Arc<dyn ChatBackend>) -> Self {
        Endpoint { name: name.into(), max_concurrency, backend }
    }
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("name", &self.name)
            .field("max_concurrency", &self.max_concurrency)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchedulerError {
    #[error("at least one endpoint is required")]
    NoEndpoints,
    #[error("endpoint {0} has max_concurrency 0")]
    ZeroConcurrency(String),
}

/// A reply (or error) together with the endpoint that produced it.
#[derive(Debug)]
pub struct Dispatched {
    pub endpoint: usize,
    pub result: Result<ChatReply, ClientError>,
}

pub struct Dispatcher {
    endpoints: Vec<Endpoint>,
    serial: bool,
    calls: AtomicU64,
}

type Pending<'a> = Pin<Box<dyn Future<Output = (usize, usize, Result<ChatReply, ClientError>)> + Send + 'a>>;

impl Dispatcher {
    pub fn new(endpoints: Vec<Endpoint>) -> Result<Self, SchedulerError> {
        if endpoints.is_empty() {
            return Err(SchedulerError::NoEndpoints);
        }
        if let Some(e) = endpoints.iter().find(|e| e.max_concurrency == 0) {
            return Err(SchedulerError::ZeroConcurrency(e.name.clone()));
        }
        Ok(Dispatcher { endpoints, serial: false, calls: AtomicU64::new(0) })
    }

    pub fn single(backend: Arc<dyn ChatBackend>, max_concurrency: usize) -> Result<Self, SchedulerError> {
        Dispatcher::new(vec![Endpoint::new("default", max_concurrency, backend)])
    }

    /// Serial mode: one request at a time, first endpoint only.
    pub fn with_serial(mut self, serial: bool) -> Self {
        self.serial = serial;
        self
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.endpoints
    }

    /// Total requests issued so far (each retry inside a backend counts once).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub async fn send(&self, req: ChatRequest) -> Result<ChatReply, ClientError> {
        self.dispatch(vec![req]).await.pop().expect("one result per request")
    }

    pub async fn dispatch(&self, requests: Vec<ChatRequest>) -> Vec<Result<ChatReply, ClientError>> {
        self.dispatch_traced(requests).await.into_iter().map(|d| d.result).collect()
    }

    /// Least-loaded-first assignment: each request goes to the endpoint with
    /// the fewest requests in flight among those below their limit (lowest
    /// index on ties). Requests wait until some endpoint has capacity.
    pub async fn dispatch_traced(&self, requests: Vec<ChatRequest>) -> Vec<Dispatched> {
        let n = requests.len();
        let limits: Vec<usize> = if self.serial {
            let mut l = vec![0; self.endpoints.len()];
            l[0] = 1;
            l
        } else {
            self.endpoints.iter().map(|e| e.max_concurrency).collect()
        };
        let mut in_flight = vec![0usize; self.endpoints.len()];
        let mut slots: Vec<Option<Dispatched>> = (0..n).map(|_| None).collect();
        let mut queue = requests.into_iter().enumerate();
        let mut next = queue.next();
        let mut running: FuturesUnordered<Pending<'_>> = FuturesUnordered::new();

        loop {
            while next.is_some() {
                let Some(lane) = (0..in_flight.len())
                    .filter(|&i| in_flight[i] < limits[i])
                    .min_by_key(|&i| (in_flight[i], i))
                else {
                    break;
                };
                let (slot, req) = next.take().expect("checked above");
                in_flight[lane] += 1;
                self.calls.fetch_add(1, Ordering::SeqCst);
                let backend = Arc::clone(&self.endpoints[lane].backend);
                running.push(Box::pin(async move {
                    let result = backend.chat(&req).await;
                    (slot, lane, result)
                }));
                next = queue.next();
            }
            match running.next().await {
                Some((slot, lane, result)) => {
                    in_flight[lane] -= 1;
                    slots[slot] = Some(Dispatched { endpoint: lane, result });
                }
                None => break,
            }
        }
        slots.into_iter().map(|s| s.expect("every request completes")).collect()
    }
}

/// Attention-cost comparison for a fixed token budget `L = route_count · ℓ̄`:
/// `route_count · ℓ̄²` for parallel routes against `L²` for a single chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_tokens: u64,
    pub route_count: u64,
    pub mean_route_length: u64,
    pub sap_attention_cost: u128,
    pub longcot_attention_cost: u128,
    /// Exact `sap / longcot`, as `"n/d"`.
    pub ratio: String,
    pub ratio_value: f64,
    /// Requests actually issued, when the report comes from a run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_calls: Option<u64>,
}

impl CostReport {
    /// `route_count` routes per generation (population size times routes per
    /// principle) of mean length `mean_route_length` tokens.
    pub fn from_mean(route_count: u64, mean_route_length: u64) -> CostReport {
        let route_count = route_count.max(1);
        let l = route_count as u128 * mean_route_length as u128;
        let sap = route_count as u128 * (mean_route_length as u128).pow(2);
        let longcot = l * l;
        let ratio = if longcot == 0 {
            Ratio::new(1u128, route_count as u128)
        } else {
            Ratio::new(sap, longcot)
        };
        CostReport {
            total_tokens: l as u64,
            route_count,
            mean_route_length,
            sap_attention_cost: sap,
            longcot_attention_cost: longcot,
            ratio: format!("{}/{}", ratio.numer(), ratio.denom()),
            ratio_value: *ratio.numer() as f64 / *ratio.denom() as f64,
            model_calls: None,
        }
    }

    /// Mean length is the rounded average of the observed per-route token counts.
    pub fn from_route_lengths(population: u64, tau: u64, lengths: &[u64]) -> CostReport {
        let mean = if lengths.is_empty() {
            0
        } else {
            let sum: u128 = lengths.iter().map(|&l| l as u128).sum();
            let n = lengths.len() as u128;
            ((2 * sum + n) / (2 * n)) as u64
        };
        CostReport::from_mean(population * tau, mean)
    }
}
