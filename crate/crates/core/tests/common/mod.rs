//! Local chat-completions servers for integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use sap_core::client::{ChatBackend, ChatMessage, ChatRequest, Role};
use sap_core::mock::{MockBehavior, MockModel};
use serde_json::{json, Value};

pub const PATH: &str = "/v1/chat/completions";

#[derive(Default)]
pub struct Recorded {
    pub bodies: Vec<Value>,
    pub auth: Vec<Option<String>>,
}

#[derive(Clone)]
struct AppState {
    model: Arc<MockModel>,
    /// Statuses served before falling through to the model, in order.
    script: Arc<Mutex<VecDeque<u16>>>,
    recorded: Arc<Mutex<Recorded>>,
}

pub struct MockServer {
    pub addr: SocketAddr,
    pub model: Arc<MockModel>,
    pub recorded: Arc<Mutex<Recorded>>,
}

impl MockServer {
    pub fn url(&self) -> String {
        format!("http://{}{}", self.addr, PATH)
    }
}

fn request_from_wire(body: &Value) -> ChatRequest {
    let messages = body["messages"]
        .as_array()
        .map(|ms| {
            ms.iter()
                .map(|m| {
                    let text = match &m["content"] {
                        Value::String(s) => s.clone(),
                        Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect(),
                        _ => String::new(),
                    };
                    let role = if m["role"] == "system" { Role::System } else { Role::User };
                    ChatMessage { role, text }
                })
                .collect()
        })
        .unwrap_or_default();
    ChatRequest { messages, image_refs: vec![], temperature: 0.0, max_tokens: 1, seed: None }
}

async fn completions(State(state): State<AppState>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    {
        let mut rec = state.recorded.lock().unwrap();
        rec.bodies.push(body.clone());
        rec.auth.push(headers.get("authorization").and_then(|v| v.to_str().ok()).map(String::from));
    }
    let scripted = state.script.lock().unwrap().pop_front();
    if let Some(status) = scripted.filter(|&s| s != 200) {
        let code = StatusCode::from_u16(status).unwrap();
        return (code, Json(json!({"error": {"message": "scripted failure"}})));
    }
    match state.model.chat(&request_from_wire(&body)).await {
        Ok(reply) => {
            let usage = reply.usage.unwrap_or_default();
            (
                StatusCode::OK,
                Json(json!({
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": reply.content}}],
                    "usage": {"prompt_tokens": usage.prompt_tokens, "completion_tokens": usage.completion_tokens},
                })),
            )
        }
        Err(e) => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": {"message": e.to_string()}}))),
    }
}

/// Serves [`MockModel`] replies over HTTP after the scripted statuses run out.
pub async fn spawn(behavior: MockBehavior, script: &[u16]) -> MockServer {
    let model = Arc::new(MockModel::new(behavior));
    let recorded = Arc::new(Mutex::new(Recorded::default()));
    let state = AppState {
        model: model.clone(),
        script: Arc::new(Mutex::new(script.iter().copied().collect())),
        recorded: recorded.clone(),
    };
    let app = Router::new().route(PATH, post(completions)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    MockServer { addr, model, recorded }
}

/// Starts a server on its own runtime thread, for tests that drive the binary.
pub fn spawn_blocking(behavior: MockBehavior) -> MockServer {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let server = spawn(behavior, &[]).await;
            tx.send(server).unwrap();
            std::future::pending::<()>().await;
        });
    });
    rx.recv().unwrap()
}

pub const MANIFEST: &str = r#"{
  "images": [{"image_index": 1, "source_id": "street.jpg", "width": 640, "height": 480}],
  "objects": [
    {"image_index": 1, "object_index": 1, "label": "red car", "bbox": [10, 20, 200, 150], "score": 0.93},
    {"image_index": 1, "object_index": 2, "label": "tree", "bbox": [300, 0, 420, 400], "score": 0.88}
  ]
}"#;

pub const TASK: &str = r#"{"prompt": "What is parked next to the tree?", "images": []}"#;

/// Writes the fixture task and manifest into `dir`.
pub fn fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let task = dir.join("task.json");
    let manifest = dir.join("manifest.json");
    std::fs::write(&task, TASK).unwrap();
    std::fs::write(&manifest, MANIFEST).unwrap();
    (task, manifest)
}

pub fn schema() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/run_history.schema.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Error messages from validating `doc` against the run-history schema.
pub fn schema_errors(doc: &Value) -> Vec<String> {
    let schema = schema();
    let validator = jsonschema::draft202012::new(&schema).expect("schema compiles");
    validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect()
}
