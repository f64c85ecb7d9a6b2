//! The service driven over HTTP, including restarts.

use std::path::Path;
use std::sync::Arc;

use prefkit_core::corpus::{load_dataset, save_dataset};
use prefkit_service::{serve_with_shutdown, ExportBundle, Service, ServiceConfig};
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

fn seed(dir: &Path, prompts: usize) {
    let mut p = String::new();
    let mut g = String::new();
    for i in 1..=prompts {
        p.push_str(&format!(
            "{{\"id\":\"p{i}\",\"text\":\"prompt {i}\",\"category\":\"Animals\",\"unclear_intent\":false,\"issue_flags\":[]}}\n"
        ));
        for j in 1..=4 {
            g.push_str(&format!("{{\"id\":\"p{i}_{j}\",\"prompt_id\":\"p{i}\",\"embedding_id\":\"p{i}_{j}\"}}\n"));
        }
    }
    std::fs::write(dir.join("prompts.jsonl"), p).unwrap();
    std::fs::write(dir.join("generations.jsonl"), g).unwrap();
    std::fs::write(
        dir.join("annotators.jsonl"),
        "{\"id\":\"a1\"}\n{\"id\":\"a2\"}\n{\"id\":\"a3\",\"active\":false}\n",
    )
    .unwrap();
    let gold: String = (0..5)
        .map(|i| format!("{{\"prompt_id\":\"g\",\"first_id\":\"x{i}\",\"second_id\":\"y{i}\",\"verdict\":\"first_better\"}}\n"))
        .collect();
    std::fs::write(dir.join("gold.jsonl"), gold).unwrap();
}

struct Server {
    base: String,
    client: reqwest::Client,
    service: Arc<Service>,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl Server {
    async fn start(dir: &Path) -> Self {
        Self::start_with(ServiceConfig::new(dir)).await
    }

    async fn start_with(config: ServiceConfig) -> Self {
        let service = Arc::new(Service::open(config).unwrap());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (stop, rx) = oneshot::channel();
        let handle = tokio::spawn(serve_with_shutdown(listener, service.clone(), async {
            let _ = rx.await;
        }));
        Self {
            base,
            client: reqwest::Client::new(),
            service,
            stop: Some(stop),
            handle: Some(handle),
        }
    }

    async fn stop(mut self) {
        let _ = self.stop.take().unwrap().send(());
        self.handle.take().unwrap().await.unwrap().unwrap();
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn task(&self, annotator: &str) -> Value {
        let (status, body) = self.get(&format!("/tasks/next?annotator={annotator}")).await;
        assert_eq!(status, 200, "{body}");
        body["task"].clone()
    }

    async fn annotate_prompt(&self, annotator: &str) -> Value {
        let task = self.task(annotator).await;
        assert_eq!(task["stage"], "prompt_annotation");
        let (status, body) = self
            .post(
                "/annotations/prompt",
                json!({"task_id": task["task_id"], "annotator_id": annotator, "category": "Food", "issue_flags": ["pii"]}),
            )
            .await;
        assert_eq!(status, 200, "{body}");
        task
    }

    /// Rates every image of the annotator's current task with `overall`.
    async fn rate_all(&self, annotator: &str, overall: &[u8]) -> Value {
        let mut task = self.task(annotator).await;
        for score in overall {
            assert_eq!(task["stage"], "rating", "{task}");
            let image = task["images"][0]["id"].clone();
            let (status, body) = self
                .post(
                    "/annotations/rating",
                    json!({"task_id": task["task_id"], "image_id": image, "annotator_id": annotator,
                           "overall": score, "alignment": 4, "fidelity": 5, "problem_flags": []}),
                )
                .await;
            assert_eq!(status, 200, "{body}");
            task = self.task(annotator).await;
        }
        task
    }

    async fn rank(&self, task: &Value, annotator: &str, slots: Value) -> (u16, Value) {
        self.post(
            "/annotations/ranking",
            json!({"task_id": task["task_id"], "prompt_id": task["prompt_id"], "annotator_id": annotator, "slots": slots}),
        )
        .await
    }
}

fn codes(body: &Value) -> Vec<String> {
    body["reasons"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["code"].as_str().unwrap().to_string())
        .collect()
}

fn ids(prompt: &str, order: &[usize]) -> Vec<String> {
    order.iter().map(|j| format!("{prompt}_{j}")).collect()
}

#[tokio::test(flavor = "multi_thread")]
async fn full_workflow_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 2);
    let s = Server::start(dir.path()).await;

    let first = s.annotate_prompt("a1").await;
    assert_eq!(first["prompt_id"], "p1");
    let task = s.rate_all("a1", &[7, 5, 5, 2]).await;
    assert_eq!(task["stage"], "ranking");
    assert_eq!(task["ratings"]["p1_1"], 7);
    let (status, body) = s
        .rank(&task, "a1", json!([ids("p1", &[1]), ids("p1", &[2, 3]), [], ids("p1", &[4])]))
        .await;
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["submission_id"], "p1:1");
    // The second annotator gets the other prompt.
    assert_eq!(s.task("a2").await["prompt_id"], "p2");

    let (_, progress) = s.get("/progress").await;
    assert_eq!(progress["awaiting_review"], 1);
    assert_eq!(progress["prompt_annotation"], 1);

    let (status, bundle) = s.get("/export").await;
    assert_eq!(status, 200);
    let bundle: ExportBundle = serde_json::from_value(bundle).unwrap();
    assert_eq!(bundle.rankings.len(), 1);
    assert_eq!(bundle.ratings.len(), 4);
    let p1 = bundle.prompts.iter().find(|p| p.id == "p1").unwrap();
    assert_eq!(serde_json::to_value(p1.category).unwrap(), "Food");
    let dataset = bundle.clone().into_dataset().unwrap();
    assert_eq!(dataset.pairs().len(), 5);
    let out = tempfile::tempdir().unwrap();
    save_dataset(&dataset, out.path()).unwrap();
    assert_eq!(load_dataset(out.path()).unwrap(), dataset);
    assert_eq!(s.service.export(), bundle);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn documented_rejections() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 1);
    let s = Server::start(dir.path()).await;
    s.annotate_prompt("a1").await;
    let task = s.task("a1").await;

    let (status, body) = s
        .post(
            "/annotations/rating",
            json!({"task_id": task["task_id"], "image_id": "p1_1", "annotator_id": "a1",
                   "overall": 8, "alignment": 0, "fidelity": 4, "problem_flags": ["none", "fuzzy"]}),
        )
        .await;
    assert_eq!(status, 422);
    assert_eq!(codes(&body), ["out_of_range", "out_of_range", "invalid_flags"]);
    assert_eq!(body["reasons"][0]["aspect"], "overall");
    assert_eq!(body["reasons"][0]["value"], 8);

    let (status, body) = s
        .post(
            "/annotations/rating",
            json!({"task_id": "p1:1:ranking", "image_id": "p1_1", "annotator_id": "a1",
                   "overall": 3, "alignment": 3, "fidelity": 3}),
        )
        .await;
    assert_eq!((status, codes(&body)), (409, vec!["task_not_issued".to_string()]));

    let (status, body) = s
        .post(
            "/annotations/rating",
            json!({"task_id": task["task_id"], "image_id": "p1_9", "annotator_id": "a1",
                   "overall": 3, "alignment": 3, "fidelity": 3}),
        )
        .await;
    assert_eq!((status, codes(&body)), (422, vec!["unknown_image".to_string()]));

    let task = s.rate_all("a1", &[6, 6, 3, 1]).await;

    let (status, body) = s.rank(&task, "a1", json!([ids("p1", &[1, 2, 3]), ids("p1", &[4])])).await;
    assert_eq!(status, 422);
    assert_eq!(codes(&body), ["slot_overflow"]);
    assert_eq!(body["reasons"][0]["size"], 3);

    let (status, body) = s.rank(&task, "a1", json!([ids("p1", &[1, 2]), ids("p1", &[3])])).await;
    assert_eq!((status, codes(&body)), (422, vec!["unplaced_image".to_string()]));
    assert_eq!(body["reasons"][0]["image_id"], "p1_4");

    // p1_3 (rated 3) ranked above p1_1 (rated 6).
    let (status, body) = s
        .rank(&task, "a1", json!([ids("p1", &[3]), ids("p1", &[1, 2]), ids("p1", &[4])]))
        .await;
    assert_eq!(status, 422);
    assert_eq!(codes(&body), ["consistency_violation", "consistency_violation"]);
    assert_eq!(body["reasons"][0]["higher_id"], "p1_3");
    assert_eq!(body["reasons"][0]["lower_id"], "p1_1");
    assert_eq!(body["reasons"][0]["higher_overall"], 3);
    assert_eq!(body["reasons"][0]["lower_overall"], 6);

    let (status, body) = s
        .rank(&task, "a1", json!([[], ids("p1", &[1]), [], [], [], ids("p1", &[2, 3, 4])]))
        .await;
    assert_eq!(status, 422);
    assert_eq!(codes(&body), ["too_many_slots", "slot_overflow"]);

    let (status, body) = s.get("/tasks/next?annotator=nobody").await;
    assert_eq!((status, codes(&body)), (404, vec!["unknown_annotator".to_string()]));
    let (status, body) = s.get("/tasks/next?annotator=a3").await;
    assert_eq!((status, codes(&body)), (403, vec!["inactive_annotator".to_string()]));
    let (status, body) = s.post("/annotations/ranking", json!({"slots": 3})).await;
    assert_eq!((status, codes(&body)), (400, vec!["malformed_request".to_string()]));

    // Nothing rejected reached the record.
    assert!(s.service.export().rankings.is_empty());
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn acknowledged_work_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 3);
    let s = Server::start(dir.path()).await;
    s.annotate_prompt("a1").await;
    let task = s.rate_all("a1", &[5, 4, 4, 1]).await;
    let (status, _) = s.rank(&task, "a1", json!([ids("p1", &[1]), ids("p1", &[2, 3]), ids("p1", &[4])])).await;
    assert_eq!(status, 200);
    s.annotate_prompt("a2").await;
    let mid = s.rate_all("a2", &[3, 3]).await;
    let before_export = s.service.export();
    let before_progress = s.service.progress();
    s.stop().await;

    // Simulate a crash in the middle of a later write.
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(dir.path().join("annotations.log"))
        .unwrap();
    f.write_all(b"{\"event\":\"rating\",\"prompt_id\":\"p2\"").unwrap();
    drop(f);

    let s = Server::start(dir.path()).await;
    assert_eq!(s.service.export(), before_export);
    assert_eq!(s.service.progress(), before_progress);
    let resumed = s.task("a2").await;
    assert_eq!(resumed["task_id"], mid["task_id"]);
    assert_eq!(resumed["images"].as_array().unwrap().len(), 2);
    let task = s.rate_all("a2", &[2, 1]).await;
    assert_eq!(task["stage"], "ranking");

    s.service.compact().unwrap();
    let compacted = s.service.export();
    s.stop().await;
    let s = Server::start(dir.path()).await;
    assert_eq!(s.service.export(), compacted);
    assert_eq!(s.task("a2").await["task_id"], task["task_id"]);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_review_requeues_once() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 2);
    let s = Server::start(dir.path()).await;
    for (annotator, prompt) in [("a1", "p1"), ("a2", "p2")] {
        s.annotate_prompt(annotator).await;
        let task = s.rate_all(annotator, &[4, 4, 4, 4]).await;
        let (status, _) = s.rank(&task, annotator, json!([ids(prompt, &[1, 2]), ids(prompt, &[3, 4])])).await;
        assert_eq!(status, 200);
    }
    let (status, _) = s.post("/review/p1:1", json!({"verdict": "valid"})).await;
    assert_eq!(status, 200);
    let (status, body) = s.post("/review/p1:1", json!({"verdict": "invalid"})).await;
    assert_eq!((status, codes(&body)), (409, vec!["already_reviewed".to_string()]));
    let (status, _) = s
        .post("/review/p2:1", json!({"verdict": "invalid", "reassign_to": "a1"}))
        .await;
    assert_eq!(status, 200);
    let (status, body) = s.post("/review/p2:1", json!({"verdict": "invalid"})).await;
    assert_eq!((status, codes(&body)), (409, vec!["already_reviewed".to_string()]));
    let (status, body) = s.post("/review/p9:1", json!({"verdict": "valid"})).await;
    assert_eq!((status, codes(&body)), (404, vec!["unknown_submission".to_string()]));

    let export = s.service.export();
    assert_eq!(export.rankings.len(), 1);
    assert_eq!(export.rankings[0].prompt_id, "p1");
    assert!(export.ratings.iter().all(|r| r.image_id.starts_with("p1")));
    let progress = s.service.progress();
    assert_eq!((progress.accepted, progress.invalidated_attempts), (1, 1));

    // Re-queued exactly once, straight to the reassigned annotator.
    let again = s.task("a1").await;
    assert_eq!(again["task_id"], "p2:2:prompt_annotation");
    assert_eq!(s.task("a2").await, Value::Null);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn qualification_threshold_is_inclusive() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 1);
    let s = Server::start(dir.path()).await;
    let labels = |agree: usize| -> Value {
        (0..5)
            .map(|i| {
                let verdict = if i < agree { "first_better" } else { "second_better" };
                json!({"prompt_id": "g", "first_id": format!("x{i}"), "second_id": format!("y{i}"), "verdict": verdict})
            })
            .collect()
    };
    let (status, r) = s.post("/annotators", json!({"annotator_id": "n1", "labels": labels(5)})).await;
    assert_eq!(status, 200);
    assert_eq!((r["score"].as_f64(), r["admitted"].as_bool()), (Some(1.0), Some(true)));
    let (_, r) = s.post("/annotators", json!({"annotator_id": "n2", "labels": labels(0)})).await;
    assert_eq!((r["score"].as_f64(), r["admitted"].as_bool()), (Some(0.0), Some(false)));
    let (_, r) = s.post("/annotators", json!({"annotator_id": "n3", "labels": labels(3)})).await;
    assert_eq!((r["score"].as_f64(), r["admitted"].as_bool()), (Some(0.6), Some(true)));
    let (status, body) = s
        .post("/annotators", json!({"annotator_id": "n4", "labels": [{"prompt_id": "q", "first_id": "a", "second_id": "b", "verdict": "tie"}]}))
        .await;
    assert_eq!((status, codes(&body)), (422, vec!["no_overlap".to_string()]));

    assert_eq!(s.task("n1").await["prompt_id"], "p1");
    let (status, _) = s.get("/tasks/next?annotator=n2").await;
    assert_eq!(status, 403);
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn skips_are_capped() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 4);
    let mut config = ServiceConfig::new(dir.path());
    config.skip_cap = 2;
    let s = Server::start_with(config).await;
    for expected in ["p1", "p2"] {
        let task = s.task("a1").await;
        assert_eq!(task["prompt_id"], expected);
        let (status, _) = s.post("/tasks/skip", json!({"task_id": task["task_id"], "annotator_id": "a1"})).await;
        assert_eq!(status, 200);
    }
    let task = s.task("a1").await;
    assert_eq!(task["prompt_id"], "p3");
    let (status, body) = s.post("/tasks/skip", json!({"task_id": task["task_id"], "annotator_id": "a1"})).await;
    assert_eq!((status, codes(&body)), (409, vec!["skip_limit_reached".to_string()]));
    // Skipped prompts go to others, least served first.
    assert_eq!(s.task("a2").await["prompt_id"], "p4");
    s.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_dispatch_never_double_assigns() {
    let dir = tempfile::tempdir().unwrap();
    seed(dir.path(), 30);
    let mut lines = String::new();
    for i in 0..40 {
        lines.push_str(&format!("{{\"id\":\"w{i:02}\"}}\n"));
    }
    std::fs::write(dir.path().join("annotators.jsonl"), lines).unwrap();
    let s = Arc::new(Server::start(dir.path()).await);
    let mut handles = Vec::new();
    for i in 0..40 {
        let s = s.clone();
        handles.push(tokio::spawn(async move { s.task(&format!("w{i:02}")).await }));
    }
    let mut assigned = Vec::new();
    for h in handles {
        let t = h.await.unwrap();
        if !t.is_null() {
            assigned.push(t["prompt_id"].as_str().unwrap().to_string());
        }
    }
    assert_eq!(assigned.len(), 30);
    assigned.sort();
    assigned.dedup();
    assert_eq!(assigned.len(), 30);
}

#[tokio::test(flavor = "multi_thread")]
async fn empty_store_exports_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = Server::start(dir.path()).await;
    let (status, bundle) = s.get("/export").await;
    assert_eq!(status, 200);
    let bundle: ExportBundle = serde_json::from_value(bundle).unwrap();
    assert_eq!(bundle, ExportBundle::default());
    let (status, _) = s.get("/tasks/next?annotator=x").await;
    assert_eq!(status, 404);
    let out = tempfile::tempdir().unwrap();
    s.service.export_to(out.path()).unwrap();
    for f in ["prompts.jsonl", "generations.jsonl", "ratings.jsonl", "rankings.jsonl"] {
        assert_eq!(std::fs::read_to_string(out.path().join(f)).unwrap(), "", "{f}");
    }
    s.stop().await;
}
