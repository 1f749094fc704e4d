use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lakechart_core::align::baseline_align;
use lakechart_core::ingest::LoadOptions;
use lakechart_core::pipeline::{column_label, run, RecommendationPayload, RunOptions};
use lakechart_core::synth::{generate, salary_fixture, write_lake, SynthConfig, WrittenLake};
use lakechart_core::{ColumnRef, EngineConfig};
use lakechart_service::{router, AppState};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    _dir: TempDir,
    lake: WrittenLake,
    data: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let lake = write_lake(&salary_fixture(), &dir.path().join("lake")).unwrap();
    let data = dir.path().join("data");
    Fixture {
        _dir: dir,
        lake,
        data,
    }
}

fn app(data: &std::path::Path) -> (Arc<AppState>, Router) {
    let state = Arc::new(AppState::open(data).unwrap());
    (Arc::clone(&state), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn create_body(lake: &WrittenLake) -> Value {
    serde_json::to_value(lake.source()).unwrap()
}

async fn session(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn creates_session_with_schema() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let (status, v) = call(&app, "POST", "/sessions", Some(create_body(&fx.lake))).await;
    assert_eq!(status, StatusCode::CREATED);
    let tables = v["schema"]["tables"].as_array().unwrap();
    assert_eq!(tables.len(), 6);
    assert_eq!(tables[0]["role"], "query");
    assert_eq!(tables[0]["columns"][0]["dtype"], "categorical");
    assert_eq!(tables[0]["columns"][1]["dtype"], "numerical");
    assert_eq!(v["schema"]["alignment_origin"], "file");
}

#[tokio::test]
async fn bad_path_is_an_io_error() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let body = json!({ "query": "/nonexistent/q.csv", "results": [fx.lake.results[0]] });
    let (status, v) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "IoError");
    assert!(v["message"].as_str().unwrap().contains("nonexistent"));
}

#[tokio::test]
async fn unparseable_table_is_a_parse_error() {
    let fx = fixture();
    let bad = fx.data.parent().unwrap().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2,3\n\"open").unwrap();
    let (_, app) = app(&fx.data);
    let body = json!({ "query": bad, "results": [fx.lake.results[0]] });
    let (status, v) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["code"].as_str().is_some_and(|c| !c.is_empty()), "{v}");
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({ "results": [] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "BadRequest");
}

#[tokio::test]
async fn identical_inputs_share_a_cache_key() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let (_, a) = call(&app, "POST", "/sessions", Some(create_body(&fx.lake))).await;
    let (_, b) = call(&app, "POST", "/sessions", Some(create_body(&fx.lake))).await;
    assert_ne!(a["session_id"], b["session_id"]);
    assert_eq!(a["input_key"], b["input_key"]);
    let ra = call(&app, "GET", &format!("/sessions/{}/recommendations", a["session_id"].as_str().unwrap()), None).await.1;
    let rb = call(&app, "GET", &format!("/sessions/{}/recommendations", b["session_id"].as_str().unwrap()), None).await.1;
    assert_eq!(ra["key"], rb["key"]);
    assert_eq!(ra["cache_hit"], false);
    assert_eq!(rb["cache_hit"], true);

    let mut other = create_body(&fx.lake);
    other["config"] = json!({ "seed": 99 });
    let (_, c) = call(&app, "POST", "/sessions", Some(other)).await;
    assert_eq!(a["input_key"], c["input_key"]);
    let rc = call(&app, "GET", &format!("/sessions/{}/recommendations", c["session_id"].as_str().unwrap()), None).await.1;
    assert_ne!(ra["key"], rc["key"]);
}

#[tokio::test]
async fn schema_edges_match_alignment_file() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/schema"), None).await;
    assert_eq!(status, StatusCode::OK);
    let lake = salary_fixture();
    let mut want: Vec<(usize, String, usize)> = lake
        .alignment
        .iter()
        .flat_map(|(q, rs)| {
            let lake = &lake;
            rs.iter()
                .map(move |r| (q, lake.table(r.table).unwrap().name.clone(), r.column))
        })
        .collect();
    let mut got: Vec<(usize, String, usize)> = v["alignment"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                e["query_index"].as_u64().unwrap() as usize,
                e["table"].as_str().unwrap().to_string(),
                e["column_index"].as_u64().unwrap() as usize,
            )
        })
        .collect();
    want.sort();
    got.sort();
    assert_eq!(got, want);
    assert_eq!(got.len(), 10);
}

#[tokio::test]
async fn baseline_session_edges_match_baseline_alignment() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let mut body = create_body(&fx.lake);
    body.as_object_mut().unwrap().remove("alignment");
    let id = session(&app, body).await;
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/schema"), None).await;
    assert_eq!(v["alignment_origin"], "baseline");

    let cfg = EngineConfig::default();
    let th = cfg.inference;
    let source = fx.lake.source();
    let query = lakechart_core::ingest::load_table(&source.query, &LoadOptions::default(), &th).unwrap();
    let results = lakechart_core::ingest::load_tables(&source.result_files().unwrap(), &LoadOptions::default(), &th).unwrap();
    let lake = lakechart_core::Lake::unaligned(query, results).unwrap();
    let map = baseline_align(lake.query(), lake.results(), cfg.align_threshold, cfg.seed);
    let mut want: Vec<(String, String)> = map
        .iter()
        .flat_map(|(q, rs)| rs.iter().map(move |r| (q, *r)))
        .map(|(q, r)| (column_label(&lake, ColumnRef::query(q)), lake.qualified_name(r)))
        .collect();
    let mut got: Vec<(String, String)> = v["alignment"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                e["query_column"].as_str().unwrap().to_string(),
                format!("{}.{}", e["table"].as_str().unwrap(), e["column"].as_str().unwrap()),
            )
        })
        .collect();
    want.sort();
    got.sort();
    assert!(!want.is_empty());
    assert_eq!(got, want);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    for uri in ["/sessions/nope/schema", "/sessions/nope/recommendations"] {
        let (status, v) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(v["code"], "NotFound");
    }
    let plan = json!({ "A": "City", "M": "Salary", "F": "AVG" });
    let (status, _) = call(&app, "POST", "/sessions/nope/plans/evaluate", Some(plan)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn recommendations_match_the_engine_and_hit_the_cache() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let uri = format!("/sessions/{id}/recommendations");
    let (status, first) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["status"], "done");
    assert_eq!(first["cache_hit"], false);
    assert!(first["timing_ms"].as_f64().unwrap() >= 0.0);
    let (_, second) = call(&app, "GET", &uri, None).await;
    assert_eq!(second["cache_hit"], true);
    assert_eq!(first["result"], second["result"]);

    let (prep, rec) = run(Arc::new(salary_fixture()), EngineConfig::default()).unwrap();
    let want: Value = serde_json::from_str(
        &RecommendationPayload::new(&prep, &rec, RunOptions::from_config(&prep.config)).to_json(),
    )
    .unwrap();
    assert_eq!(first["result"]["plans"], want["plans"]);
    let plans = first["result"]["plans"].as_array().unwrap();
    assert!(!plans.is_empty());
    let utilities: Vec<f64> = plans.iter().map(|p| p["utility"].as_f64().unwrap()).collect();
    assert!(utilities.windows(2).all(|w| w[0] >= w[1]));
    for p in plans {
        assert!(p["plan"]["A"].is_string() && p["plan"]["M"].is_string());
        assert!(p["series"].as_array().unwrap().iter().all(|s| s["label"].is_string()));
    }
}

#[tokio::test]
async fn query_parameters_change_the_run() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/recommendations?n=0"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["result"]["plans"], json!([]));
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/recommendations?n=2&strategy=nomerge&prune=off"), None).await;
    assert_eq!(v["result"]["plans"].as_array().unwrap().len(), 2);
    assert_eq!(v["result"]["strategy"], "nomerge");
    assert_eq!(v["result"]["prune"], false);
    for bad in ["n=x", "strategy=best", "prune=maybe"] {
        let (status, v) = call(&app, "GET", &format!("/sessions/{id}/recommendations?{bad}"), None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        assert_eq!(v["code"], "BadRequest");
    }
}

#[tokio::test]
async fn no_valid_plans_is_422() {
    let dir = TempDir::new().unwrap();
    let q = dir.path().join("q.csv");
    std::fs::write(&q, "note\nfirst free text line here\nanother distinct free text line\nyet another long unique line\n").unwrap();
    let (_, app) = app(&dir.path().join("data"));
    let id = session(&app, json!({ "query": q, "results": [] })).await;
    let (status, v) = call(&app, "GET", &format!("/sessions/{id}/recommendations"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["code"], "NoValidPlans");
}

#[tokio::test]
async fn async_runs_are_polled_to_completion() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let uri = format!("/sessions/{id}/recommendations?async=1&n=3");
    let (status, v) = call(&app, "GET", &uri, None).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(v["status"], "running");
    let mut done = None;
    for _ in 0..600 {
        let (status, v) = call(&app, "GET", &uri, None).await;
        if status == StatusCode::OK {
            done = Some(v);
            break;
        }
        assert_eq!(v["status"], "running");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let done = done.expect("async run finished");
    assert_eq!(done["status"], "done");
    assert_eq!(done["result"]["plans"].as_array().unwrap().len(), 3);
    let (_, sync) = call(&app, "GET", &format!("/sessions/{id}/recommendations?n=3"), None).await;
    assert_eq!(sync["cache_hit"], true);
    assert_eq!(sync["result"], done["result"]);
}

#[tokio::test]
async fn concurrent_identical_runs_compute_once() {
    let dir = TempDir::new().unwrap();
    let lake = write_lake(&generate(&SynthConfig::desk(5)).unwrap(), &dir.path().join("lake")).unwrap();
    let (_, app) = app(&dir.path().join("data"));
    let id = session(&app, serde_json::to_value(lake.source()).unwrap()).await;
    let uri = format!("/sessions/{id}/recommendations");
    let calls = (0..4).map(|_| {
        let app = app.clone();
        let uri = uri.clone();
        tokio::spawn(async move { call(&app, "GET", &uri, None).await })
    });
    let mut misses = 0;
    let mut bodies = Vec::new();
    for c in calls {
        let (status, v) = c.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        misses += usize::from(v["cache_hit"] == false);
        bodies.push(v["result"].clone());
    }
    assert_eq!(misses, 1);
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn evaluates_the_salary_plan() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let uri = format!("/sessions/{id}/plans/evaluate");
    let (status, v) = call(&app, "POST", &uri, Some(json!({ "A": "City", "M": "Salary", "F": "AVG" }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!((v["utility"].as_f64().unwrap() - 0.16).abs() <= 0.005, "{}", v["utility"]);
    let series = v["series"].as_array().unwrap();
    assert_eq!(series.len(), 2);
    assert_eq!(v["domain"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn series_override_is_checked() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let uri = format!("/sessions/{id}/plans/evaluate");
    let body = json!({
        "A": "City", "M": "Salary", "F": "AVG",
        "series": [["Salary", "pay_1.Salary"], ["tuition_1.Tuition"]],
    });
    let (status, v) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["series"].as_array().unwrap().len(), 2);
    let body = json!({ "A": "City", "M": "Salary", "F": "AVG", "series": [["Salary", "Salary"]] });
    let (status, v) = call(&app, "POST", &uri, Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "InvalidPlan");
}

#[tokio::test]
async fn invalid_triples_are_422() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let uri = format!("/sessions/{id}/plans/evaluate");
    for plan in [
        json!({ "A": "City", "M": "City", "F": "COUNT" }),
        json!({ "A": "Salary", "M": "City", "F": "SUM" }),
        json!({ "A": "City", "M": "Nope", "F": "AVG" }),
        json!({ "A": "City", "M": "Salary", "F": "MEDIAN" }),
    ] {
        let (status, v) = call(&app, "POST", &uri, Some(plan.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{plan}");
        assert_eq!(v["code"], "InvalidPlan", "{plan}");
    }
    let (status, v) = call(&app, "POST", &uri, Some(json!({ "A": "City" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "BadRequest");
}

#[tokio::test]
async fn plan_options_follow_the_typing_rules() {
    let fx = fixture();
    let (_, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let (_, v) = call(&app, "GET", &format!("/sessions/{id}/schema"), None).await;
    let opts = v["plan_options"].as_array().unwrap();
    let city = opts.iter().find(|o| o["A"] == "City").unwrap();
    let salary = city["measures"].as_array().unwrap().iter().find(|m| m["M"] == "Salary").unwrap();
    assert_eq!(salary["functions"], json!(["COUNT", "SUM", "AVG", "MIN", "MAX"]));
    assert!(city["measures"].as_array().unwrap().iter().all(|m| m["M"] != "City"));
    let by_salary = opts.iter().find(|o| o["A"] == "Salary").unwrap();
    let cat = by_salary["measures"].as_array().unwrap().iter().find(|m| m["M"] == "City").unwrap();
    assert_eq!(cat["functions"], json!(["COUNT"]));
}

#[tokio::test]
async fn flush_persists_results_and_sessions_across_restarts() {
    let fx = fixture();
    let (state, app) = app(&fx.data);
    let id = session(&app, create_body(&fx.lake)).await;
    let (_, first) = call(&app, "GET", &format!("/sessions/{id}/recommendations"), None).await;
    state.flush().await;
    let key = first["key"].as_str().unwrap();
    assert!(fx.data.join("results").join(format!("{key}.json")).exists());
    let index: Vec<String> = serde_json::from_slice(&std::fs::read(fx.data.join("index.json")).unwrap()).unwrap();
    assert_eq!(index, vec![id.clone()]);
    drop(app);

    let (state, app) = self::app(&fx.data);
    assert_eq!(state.session_count(), 1);
    let (status, again) = call(&app, "GET", &format!("/sessions/{id}/recommendations"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["cache_hit"], true);
    assert_eq!(again["result"], first["result"]);
}

#[tokio::test]
async fn serves_over_tcp_and_shuts_down_gracefully() {
    let fx = fixture();
    let state = Arc::new(AppState::open(&fx.data).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(lakechart_service::serve(listener, Arc::clone(&state), async {
        let _ = rx.await;
    }));
    let out = tokio::task::spawn_blocking(move || {
        use std::io::{Read, Write};
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        stream
            .write_all(b"GET /sessions/x/schema HTTP/1.1\r\nhost: x\r\nconnection: close\r\n\r\n")
            .unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    })
    .await
    .unwrap();
    assert!(out.starts_with("HTTP/1.1 404"), "{out}");
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
    assert!(fx.data.join("index.json").exists());
}
