mod common;

use std::sync::Arc;

use aeroloop::config::PipelineConfig;
use aeroloop::pipeline::Pipeline;
use aeroloop::service::{router, AppState};
use aeroloop_core::SplitTag;
use common::{micro_config, spawn, write_corpus};
use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};

const TOKEN: &str = "s3cret";

struct Api {
    base: String,
    client: Client,
}

impl Api {
    fn get(&self, path: &str) -> RequestBuilder {
        self.client.get(format!("{}{path}", self.base)).bearer_auth(TOKEN)
    }

    fn post(&self, path: &str, body: Value) -> RequestBuilder {
        self.client.post(format!("{}{path}", self.base)).bearer_auth(TOKEN).json(&body)
    }
}

/// A dataset with `sources` ingested and drafted sources, and a service over it.
fn setup(sources: usize, tweak: impl FnOnce(&mut PipelineConfig)) -> (tempfile::TempDir, Pipeline, Api) {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), sources);
    let mut config = micro_config(dir.path());
    config.service.auth_token = Some(TOKEN.into());
    tweak(&mut config);
    let p = Pipeline::open(config.clone()).unwrap();
    p.ingest().unwrap();
    p.annotate(false).unwrap();
    let base = spawn(router(Arc::new(AppState::new(config).unwrap())));
    (dir, p, Api { base, client: Client::new() })
}

#[test]
fn health_is_open_and_everything_else_needs_the_token() {
    let (_d, _p, api) = setup(0, |_| {});
    let r = api.client.get(format!("{}/health", api.base)).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));

    let r = api.client.get(format!("{}/review/stats", api.base)).send().unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    let r = api
        .client
        .get(format!("{}/review/stats", api.base))
        .bearer_auth("wrong")
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNAUTHORIZED);
    assert_eq!(api.get("/review/stats").send().unwrap().status(), StatusCode::OK);
}

#[test]
fn empty_queue_answers_no_content() {
    let (_d, _p, api) = setup(0, |_| {});
    let r = api.get("/review/next?reviewer=alice").send().unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
}

#[test]
fn review_flow_claims_resolves_and_guards_conflicts() {
    let (_d, p, api) = setup(1, |_| {});
    let stats: Value = api.get("/review/stats").send().unwrap().json().unwrap();
    assert_eq!((stats["total"].as_u64(), stats["pending"].as_u64()), (Some(4), Some(4)));

    let a: Value = api.get("/review/next?reviewer=alice").send().unwrap().json().unwrap();
    let task = a["task_id"].as_str().unwrap().to_owned();
    assert!(a["preview_url"].as_str().unwrap().ends_with("/preview"));
    assert!(a["draft"]["merged_intention"].as_str().is_some_and(|s| !s.is_empty()));
    // Same reviewer gets the same live claim back; another reviewer gets a different task.
    let again: Value = api.get("/review/next?reviewer=alice").send().unwrap().json().unwrap();
    assert_eq!(again["task_id"], a["task_id"]);
    let b: Value = api.get("/review/next?reviewer=bob").send().unwrap().json().unwrap();
    assert_ne!(b["task_id"], a["task_id"]);

    // Bob cannot resolve Alice's claim.
    let r = api
        .post(&format!("/review/{task}"), json!({"verdict": "accepted", "reviewer": "bob"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    // An edit must change the text.
    let draft = a["draft"]["merged_intention"].as_str().unwrap();
    let r = api
        .post(&format!("/review/{task}"), json!({"verdict": "edited", "text": draft, "reviewer": "alice"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::UNPROCESSABLE_ENTITY);

    let edited = "The drone moves forward until it reaches the bridge.";
    let r = api
        .post(&format!("/review/{task}"), json!({"verdict": "edited", "text": edited, "reviewer": "alice"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().unwrap();
    assert_eq!(body["state"], "edited");

    // Second resolution of the same task is a conflict, never an overwrite.
    let r = api
        .post(&format!("/review/{task}"), json!({"verdict": "discarded", "reviewer": "alice"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = api.post("/review/rt-nope", json!({"verdict": "accepted"})).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = api.get(&format!("/review/{task}")).send().unwrap();
    assert_eq!(r.json::<Value>().unwrap()["resolution_text"], edited);

    // Resolve the rest; the last resolution publishes the manifest.
    let b_task = b["task_id"].as_str().unwrap().to_owned();
    api.post(&format!("/review/{b_task}"), json!({"verdict": "discarded", "reviewer": "bob"}))
        .send()
        .unwrap()
        .error_for_status()
        .unwrap();
    assert!(p.dataset.manifests().latest().unwrap().is_none());
    while let Ok(r) = api.get("/review/next?reviewer=carol").send() {
        if r.status() == StatusCode::NO_CONTENT {
            break;
        }
        let t: Value = r.json().unwrap();
        let id = t["task_id"].as_str().unwrap();
        api.post(&format!("/review/{id}"), json!({"verdict": "accept", "reviewer": "carol"}))
            .send()
            .unwrap()
            .error_for_status()
            .unwrap();
    }
    let stats: Value = api.get("/review/stats").send().unwrap().json().unwrap();
    assert_eq!(
        (stats["accepted"].as_u64(), stats["edited"].as_u64(), stats["discarded"].as_u64()),
        (Some(2), Some(1), Some(1))
    );
    let m = p.dataset.manifests().latest().unwrap().expect("published after the last review");
    assert_eq!(m.count(SplitTag::Train) + m.count(SplitTag::Test), 3);
    assert!(m.entries.iter().any(|e| e.intention == edited));
    let registry = p.dataset.registry().unwrap();
    assert_eq!(
        registry
            .iter()
            .filter(|r| r.status == aeroloop_core::ClipStatus::Discarded)
            .count(),
        1
    );
}

fn items(n: usize) -> Value {
    let ids: Vec<Value> = (0..n)
        .map(|i| {
            json!({
                "video_ref": format!("{:064x}", i),
                "intention": format!("The drone moves forward {i}."),
            })
        })
        .collect();
    Value::Array(ids)
}

#[test]
fn iar_session_flow_with_conflicts_and_reload() {
    let (_d, _p, api) = setup(0, |_| {});
    let r = api
        .post("/iar/sessions", json!({"session_id": "s1", "items": items(10), "raters": 9, "seed": 3}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let s: Value = r.json().unwrap();
    let mut counts: Vec<u64> = s["per_rater"].as_array().unwrap().iter().map(|p| p[1].as_u64().unwrap()).collect();
    counts.sort();
    assert_eq!(counts, [1, 1, 1, 1, 1, 1, 1, 1, 2]);
    let r = api
        .post("/iar/sessions", json!({"session_id": "s1", "items": items(1)}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);

    let busy = s["per_rater"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p[1] == 2)
        .unwrap()[0]
        .as_str()
        .unwrap()
        .to_owned();
    let next: Value = api
        .get(&format!("/iar/sessions/s1/next?rater={busy}"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(next["progress"], json!({"judged": 0, "total": 2}));
    let item = next["item"]["item"].as_u64().unwrap();
    assert!(next["item"]["preview_url"].as_str().unwrap().starts_with("/clips/"));

    // Judging as someone else is refused; the assigned rater succeeds once.
    let r = api
        .post(&format!("/iar/s1/{item}"), json!({"aligned": true, "rater": "nobody"}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::FORBIDDEN);
    let r = api
        .post(&format!("/iar/s1/{item}"), json!({"aligned": true, "rater": busy}))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let r = api.post(&format!("/iar/s1/{item}"), json!({"aligned": true})).send().unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    assert_eq!(api.post("/iar/s1/99", json!({"aligned": true})).send().unwrap().status(), StatusCode::NOT_FOUND);
    assert_eq!(api.post("/iar/zz/0", json!({"aligned": true})).send().unwrap().status(), StatusCode::NOT_FOUND);

    // Reload mid-session restores exact progress.
    let view: Value = api.get(&format!("/iar/sessions/s1?rater={busy}")).send().unwrap().json().unwrap();
    let mine = view["items"].as_array().unwrap();
    assert_eq!(mine.len(), 2);
    assert_eq!(mine.iter().filter(|i| i["judgment"] == json!(true)).count(), 1);
    let next: Value = api
        .get(&format!("/iar/sessions/s1/next?rater={busy}"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(next["progress"]["judged"], 1);
    assert_ne!(next["item"]["item"].as_u64().unwrap(), item);

    // Finish every item: 7 of 10 aligned.
    for i in 0..10u64 {
        let _ = api.post(&format!("/iar/s1/{i}"), json!({"aligned": i < 7})).send().unwrap();
    }
    let view: Value = api.get("/iar/sessions/s1").send().unwrap().json().unwrap();
    assert_eq!(view["judged"], 10);
    assert!((view["iar_percent"].as_f64().unwrap() - 70.0).abs() < 1e-12);
    let r = api.get(&format!("/iar/sessions/s1/next?rater={busy}")).send().unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    assert_eq!(api.get("/iar/sessions/s1/next").send().unwrap().status(), StatusCode::BAD_REQUEST);
}

#[test]
fn pipeline_status_reports_each_stage() {
    let (_d, _p, api) = setup(1, |_| {});
    let status: Vec<Value> = api.get("/pipeline/status").send().unwrap().json().unwrap();
    let stages: Vec<&str> = status.iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["ingest", "annotate"]);
    assert!(status.iter().all(|s| s["state"] == "completed"));
    assert_eq!(status[0]["detail"]["kept"], 4);
}

#[test]
fn preview_runs_the_configured_encoder() {
    let (_d, p, api) = setup(1, |c| {
        c.service.preview_encoder = Some("cat".into());
        c.service.preview_content_type = "application/x-clipraw".into();
    });
    let id = p.dataset.registry().unwrap().iter().next().unwrap().clip_id.clone();
    let r = api.get(&format!("/clips/{id}/preview")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "application/x-clipraw");
    let bytes = r.bytes().unwrap();
    assert_eq!(bytes.as_ref(), std::fs::read(p.dataset.clips().path_for(&id)).unwrap());

    assert_eq!(api.get("/clips/not-hex/preview").send().unwrap().status(), StatusCode::BAD_REQUEST);
    let missing = format!("/clips/{}/preview", "0".repeat(64));
    assert_eq!(api.get(&missing).send().unwrap().status(), StatusCode::NOT_FOUND);
}

#[test]
fn preview_without_encoder_is_not_implemented() {
    let (_d, p, api) = setup(1, |_| {});
    let id = p.dataset.registry().unwrap().iter().next().unwrap().clip_id.clone();
    let r = api.get(&format!("/clips/{id}/preview")).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_IMPLEMENTED);
    assert!(r.json::<Value>().unwrap()["error"].as_str().is_some());
}
