use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use kgrid_core::api::{ApiError, CoordinatorApi, ReportOutcome, SubmitRequest};
use kgrid_core::clock::{ManualClock, MonotonicClock};
use kgrid_core::coordinator::{Coordinator, CoordinatorConfig, MemoryStore, TaskState};
use kgrid_core::eval::{CandidateSpec, EvalResult};
use kgrid_core::harness::{
    assemble_context, ContextPolicy, Generation, GenerationRequest, Generator, WhitespaceTokenCounter,
};
use kgrid_core::worker::sim::SimulatedTaskSpec;
use kgrid_core::worker::{run_worker_loop, SimBackend, TaskRunner, ThreadSandbox, WorkerAgent, WorkerConfig};
use kgrid_net::{HttpClient, HttpGenerator, ServerHandle};

fn coordinator(config: CoordinatorConfig) -> Arc<Coordinator> {
    Arc::new(Coordinator::new(
        config,
        Arc::new(MonotonicClock::new()),
        Arc::new(MemoryStore::new()),
    ))
}

fn server(c: Arc<Coordinator>) -> (ServerHandle, HttpClient) {
    let s = ServerHandle::spawn("127.0.0.1:0", c, Duration::from_millis(50)).unwrap();
    let client = HttpClient::new(&s.url()).unwrap();
    (s, client)
}

fn spec() -> CandidateSpec {
    CandidateSpec::simulated(SimulatedTaskSpec::passing(10.0, 5.0))
}

fn runner() -> TaskRunner {
    TaskRunner::new(ThreadSandbox::new(SimBackend), Duration::from_secs(5))
}

fn submit(api: &dyn CoordinatorApi, payload: CandidateSpec) -> String {
    api.submit(SubmitRequest {
        payload,
        deadline_s: None,
    })
    .unwrap()
}

#[test]
fn full_protocol_round_trip() {
    let (_s, api) = server(coordinator(CoordinatorConfig::default()));
    let caps = vec!["sim".to_string()];
    let reg = api.register("w1", &caps).unwrap();
    assert!(!reg.revived);
    assert_eq!(api.next_task("w1").unwrap(), None);

    let id = submit(&api, spec());
    assert_eq!(api.query(&id).unwrap().state, TaskState::Queued);
    let a = api.next_task("w1").unwrap().expect("assignment");
    assert_eq!(a.task_id, id);
    api.heartbeat("w1", Some(&id)).unwrap();
    assert_eq!(api.query(&id).unwrap().state, TaskState::Running);

    let result = runner().run_task(&a.payload);
    let ack = api.report("w1", &id, result.clone()).unwrap();
    assert_eq!(ack.outcome, ReportOutcome::Completed);
    assert_eq!(
        api.report("w1", &id, result.clone()).unwrap().outcome,
        ReportOutcome::Duplicate
    );
    let snap = api.query(&id).unwrap();
    assert_eq!(snap.state, TaskState::Completed);
    assert_eq!(snap.result, Some(result));
}

#[test]
fn errors_keep_their_kind_over_the_wire() {
    let (_s, api) = server(coordinator(CoordinatorConfig::default()));
    assert!(matches!(api.query("task-9999999999"), Err(ApiError::NotFound(_))));
    assert!(matches!(api.next_task("ghost"), Err(ApiError::Unauthorized(_))));
    assert!(matches!(api.heartbeat("ghost", None), Err(ApiError::Unauthorized(_))));
    let mut bad = spec();
    bad.sim.as_mut().unwrap().candidate_ms = -1.0;
    assert!(matches!(
        api.submit(SubmitRequest {
            payload: bad,
            deadline_s: None
        }),
        Err(ApiError::Validation(_))
    ));
    api.register("w1", &["sim".to_string()]).unwrap();
    api.register("w2", &["sim".to_string()]).unwrap();
    let id = submit(&api, spec());
    api.next_task("w1").unwrap().expect("assignment");
    assert!(matches!(
        api.register("w1", &["cuda".to_string()]),
        Err(ApiError::Conflict(_))
    ));
    let r = runner().run_task(&spec());
    assert!(matches!(api.report("w2", &id, r), Err(ApiError::Stale(_))));
    assert!(matches!(api.query("../etc"), Err(ApiError::Validation(_))));
}

#[test]
fn malformed_bodies_are_validation_errors() {
    let (s, _api) = server(coordinator(CoordinatorConfig::default()));
    let http = reqwest::blocking::Client::new();
    let resp = http
        .post(format!("{}/tasks", s.url()))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let body: serde_json::Value = resp.json().unwrap();
    assert_eq!(body["error"], "validation");
    let resp = http.get(format!("{}/health", s.url())).send().unwrap();
    assert_eq!(resp.status().as_u16(), 200);
}

#[test]
fn closed_port_is_unreachable() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let api = HttpClient::with_timeout(&format!("http://127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
    assert!(matches!(api.query("task-0000000001"), Err(ApiError::Unreachable(_))));
    assert!(matches!(
        api.submit(SubmitRequest {
            payload: spec(),
            deadline_s: None
        }),
        Err(ApiError::Unreachable(_))
    ));
}

#[test]
fn server_sweeps_timeouts() {
    let (_s, api) = server(coordinator(CoordinatorConfig {
        default_deadline_s: 0.2,
        ..CoordinatorConfig::default()
    }));
    api.register("w1", &["sim".to_string()]).unwrap();
    let id = submit(&api, spec());
    api.next_task("w1").unwrap().unwrap();
    let started = std::time::Instant::now();
    while api.query(&id).unwrap().attempts == 0 {
        assert!(started.elapsed() < Duration::from_secs(5), "never re-queued");
        std::thread::sleep(Duration::from_millis(20));
    }
    let snap = api.query(&id).unwrap();
    assert!(snap.state.is_pending() || snap.state.is_assigned());
    assert_eq!(snap.failure, None);
    assert_eq!(snap.result, None);
}

#[test]
fn worker_loop_over_http_matches_local_results() {
    let (_s, api) = server(coordinator(CoordinatorConfig::default()));
    let specs: Vec<CandidateSpec> = (0..20)
        .map(|i| {
            let mut s = SimulatedTaskSpec::passing(10.0 + i as f64, 4.0 + (i % 3) as f64).with_jitter(0.05, i);
            if i % 7 == 3 {
                s = s.with_kernels(&[], &["k"]);
            }
            CandidateSpec::simulated(s)
        })
        .collect();
    let ids: Vec<String> = specs.iter().map(|s| submit(&api, s.clone())).collect();

    let stop = Arc::new(AtomicBool::new(false));
    let workers: Vec<_> = (0..2)
        .map(|i| {
            let api = api.clone();
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                let mut cfg = WorkerConfig::new(format!("http-w{i}"), &["sim"]);
                cfg.poll_interval = Duration::from_millis(5);
                let mut agent = WorkerAgent::new(cfg, runner());
                run_worker_loop(&mut agent, &api, &stop)
            })
        })
        .collect();
    let started = std::time::Instant::now();
    while !ids.iter().all(|id| api.query(id).unwrap().is_terminal()) {
        assert!(started.elapsed() < Duration::from_secs(20));
        std::thread::sleep(Duration::from_millis(10));
    }
    stop.store(true, std::sync::atomic::Ordering::Release);
    let executed: usize = workers.into_iter().map(|w| w.join().unwrap().executed).sum();
    assert_eq!(executed, 20);

    let local = runner();
    for (id, spec) in ids.iter().zip(&specs) {
        let remote: EvalResult = api.query(id).unwrap().result.unwrap();
        assert_eq!(
            serde_json::to_string(&remote).unwrap(),
            serde_json::to_string(&local.run_task(spec)).unwrap()
        );
    }
}

#[test]
fn restarted_server_makes_workers_re_register() {
    let clock = ManualClock::new();
    let store = MemoryStore::new();
    let first = Arc::new(Coordinator::new(
        CoordinatorConfig::default(),
        Arc::new(clock.clone()),
        Arc::new(store.clone()),
    ));
    let (s, api) = server(first);
    api.register("w1", &["sim".to_string()]).unwrap();
    let id = submit(&api, spec());
    s.shutdown().unwrap();

    let second =
        Arc::new(Coordinator::recover(CoordinatorConfig::default(), Arc::new(clock), Arc::new(store)).unwrap());
    let (_s2, api2) = server(second);
    assert!(matches!(api2.next_task("w1"), Err(ApiError::Unauthorized(_))));
    api2.register("w1", &["sim".to_string()]).unwrap();
    assert_eq!(api2.next_task("w1").unwrap().unwrap().task_id, id);
}

#[test]
fn http_generator_protocol() {
    use axum::routing::post;
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    let app = axum::Router::new()
        .route(
            "/gen",
            post(|axum::Json(req): axum::Json<GenerationRequest>| async move {
                if req.context.turn >= 1 {
                    axum::Json(serde_json::json!({"stop": true}))
                } else {
                    axum::Json(serde_json::to_value(spec()).unwrap())
                }
            }),
        )
        .route(
            "/broken",
            post(|| async { (axum::http::StatusCode::BAD_GATEWAY, "upstream down") }),
        );
    rt.spawn(async move { axum::serve(listener, app).await });

    let ctx = |turn| GenerationRequest {
        rollout_index: 0,
        seed: 0,
        context: assemble_context(
            "p",
            &serde_json::Value::Null,
            &[],
            &ContextPolicy::default(),
            turn,
            &WhitespaceTokenCounter::default(),
        ),
    };
    let g = HttpGenerator::new(format!("http://{addr}/gen"), Duration::from_secs(5)).unwrap();
    assert_eq!(g.generate(&ctx(0)).unwrap(), Generation::Candidate(spec()));
    assert_eq!(g.generate(&ctx(1)).unwrap(), Generation::stop());
    let broken = HttpGenerator::new(format!("http://{addr}/broken"), Duration::from_secs(5)).unwrap();
    assert!(broken.generate(&ctx(0)).is_err());
    rt.shutdown_background();
}
