use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use opgrain_gateway::client::{FLAG_REQUEST_FAILED, FLAG_UNKNOWN_DECISION};
use opgrain_gateway::parser::FLAG_MISSING_CONFIDENCE;
use opgrain_gateway::stub::StubServer;
use opgrain_gateway::{Gateway, GatewayConfig, GatewayError, Instance, PromptTemplate, RetryPolicy, TemplateName, TwoStageVariant};
use reqwest::StatusCode;

fn instances(n: usize) -> Vec<Instance> {
    (0..n)
        .map(|i| Instance {
            id: format!("inst-{i:03}"),
            text: format!("sentence number {i}"),
            label: Some((i % 2) as u8),
            dataset_id: None,
        })
        .collect()
}

fn labels() -> Vec<String> {
    vec!["positive".into(), "negative".into()]
}

fn config(url: String) -> GatewayConfig {
    GatewayConfig {
        endpoint_url: url,
        retry: RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 1,
        },
        timeout_ms: 5_000,
        ..Default::default()
    }
}

fn baseline() -> PromptTemplate {
    PromptTemplate::new(TemplateName::Baseline, "Classify the sentiment.", labels())
}

#[tokio::test]
async fn fixed_reply_round_trips() {
    let stub = StubServer::fixed(r#"{"positive-score": "0.85", "negative-score": "0.15", "decision": "positive", "decision-confidence": 0.85}"#)
        .await
        .unwrap();
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.classify(&instances(3), &baseline()).await.unwrap();
    assert_eq!(out.records.len(), 3);
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.id, format!("inst-{i:03}"));
        assert_eq!(r.score_pos, Some(0.85));
        assert_eq!(r.score_pos_text.as_deref(), Some("0.85"));
        assert_eq!(r.score_neg, Some(0.15));
        assert_eq!(r.decision.as_deref(), Some("positive"));
        assert!(r.flags.is_empty());
    }
    assert_eq!(out.stats.requests, 3);
    assert_eq!(stub.requests(), 3);
}

#[tokio::test]
async fn transient_failures_are_retried() {
    let stub = StubServer::start(Duration::ZERO, |req| {
        if req.index < 2 {
            (StatusCode::SERVICE_UNAVAILABLE, "busy".into())
        } else {
            (StatusCode::OK, r#"{"positive-score": 0.4, "negative-score": 0.6}"#.into())
        }
    })
    .await
    .unwrap();
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.classify(&instances(1), &baseline()).await.unwrap();
    assert_eq!(out.records[0].score_pos, Some(0.4));
    assert_eq!(out.stats.retries, 2);
    assert_eq!(out.stats.requests, 3);
    assert_eq!(out.stats.failed_requests, 0);
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let stub = StubServer::start(Duration::ZERO, |_| (StatusCode::BAD_REQUEST, "no".into())).await.unwrap();
    let gw = Gateway::new(config(stub.url())).unwrap();
    let err = gw.classify(&instances(2), &baseline()).await.unwrap_err();
    assert!(matches!(err, GatewayError::AllFailed(2)));
    assert_eq!(stub.requests(), 2);
}

#[tokio::test]
async fn partial_failures_flag_instances_and_continue() {
    let stub = StubServer::start(Duration::ZERO, |req| {
        if req.prompt.contains("sentence number 1") {
            (StatusCode::INTERNAL_SERVER_ERROR, "boom".into())
        } else {
            (StatusCode::OK, r#"{"positive-score": 0.7}"#.into())
        }
    })
    .await
    .unwrap();
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.classify(&instances(3), &baseline()).await.unwrap();
    assert!(out.records[1].flags.contains(&FLAG_REQUEST_FAILED.to_string()));
    assert_eq!(out.records[1].score_pos, None);
    assert_eq!(out.records[0].score_pos, Some(0.7));
    assert_eq!(out.records[2].score_pos, Some(0.7));
    assert_eq!(out.stats.failed_instances, 1);
    // One instance exhausted three attempts.
    assert_eq!(out.stats.requests, 2 + 3);
}

#[tokio::test]
async fn unreachable_endpoint_fails_whole_run() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let gw = Gateway::new(config(format!("http://{addr}/v1/chat/completions"))).unwrap();
    let err = gw.classify(&instances(2), &baseline()).await.unwrap_err();
    assert!(matches!(err, GatewayError::AllFailed(2)));
}

#[tokio::test]
async fn concurrency_stays_within_bound() {
    let stub = StubServer::start(Duration::from_millis(20), |_| (StatusCode::OK, r#"{"positive-score": 0.5}"#.into()))
        .await
        .unwrap();
    let gw = Gateway::new(GatewayConfig {
        max_in_flight: 3,
        n_samples: 4,
        temperature: 1.0,
        ..config(stub.url())
    })
    .unwrap();
    let out = gw.classify(&instances(6), &baseline()).await.unwrap();
    assert_eq!(stub.requests(), 24);
    assert!(stub.peak_in_flight() <= 3, "peak {}", stub.peak_in_flight());
    assert!(stub.peak_in_flight() >= 2, "requests never overlapped");
    assert!(out.records.iter().all(|r| r.samples_pos.len() == 4));
}

#[tokio::test]
async fn twenty_samples_at_temperature_one() {
    let counter = Arc::new(AtomicUsize::new(0));
    let c = counter.clone();
    let stub = StubServer::start(Duration::ZERO, move |req| {
        assert_eq!(req.temperature, 1.0);
        let k = c.fetch_add(1, Ordering::SeqCst) % 20;
        (StatusCode::OK, format!(r#"{{"positive-score": {}}}"#, 0.05 * k as f64))
    })
    .await
    .unwrap();
    let gw = Gateway::new(GatewayConfig {
        n_samples: 20,
        temperature: 1.0,
        ..config(stub.url())
    })
    .unwrap();
    let out = gw.classify(&instances(2), &baseline()).await.unwrap();
    for r in &out.records {
        assert_eq!(r.samples_pos.len(), 20);
        assert_eq!(r.score_pos, None);
        assert!(r.samples_pos.iter().all(|s| (0.0..=1.0).contains(s)));
    }
}

#[tokio::test]
async fn greedy_pass_fills_point_score() {
    let stub = StubServer::start(Duration::ZERO, |req| {
        let score = if req.temperature == 0.0 { 0.9 } else { 0.3 };
        (StatusCode::OK, format!(r#"{{"positive-score": {score}}}"#))
    })
    .await
    .unwrap();
    let gw = Gateway::new(GatewayConfig {
        n_samples: 5,
        temperature: 1.0,
        greedy_pass: true,
        ..config(stub.url())
    })
    .unwrap();
    let out = gw.classify(&instances(1), &baseline()).await.unwrap();
    assert_eq!(out.records[0].score_pos, Some(0.9));
    assert_eq!(out.records[0].samples_pos, vec![0.3; 5]);
}

#[tokio::test]
async fn score_range_replies_are_normalized() {
    let stub = StubServer::fixed(r#"{"positive-score": "85", "negative-score": "15"}"#).await.unwrap();
    let gw = Gateway::new(config(stub.url())).unwrap();
    let t = PromptTemplate::new(TemplateName::ScoreRange(100), "ctx", labels());
    let out = gw.classify(&instances(1), &t).await.unwrap();
    assert_eq!(out.records[0].score_pos, Some(0.85));
}

async fn two_stage_stub(decision: &'static str, confidence: &'static str) -> StubServer {
    StubServer::start(Duration::ZERO, move |req| {
        let reply = if req.prompt.contains("<proposed-answer>") {
            format!(r#"{{"confidence": {confidence}}}"#)
        } else {
            format!(r#"{{"reason": "short", "decision": "{decision}"}}"#)
        };
        (StatusCode::OK, reply)
    })
    .await
    .unwrap()
}

#[tokio::test]
async fn two_stage_positive_decision_keeps_confidence() {
    let stub = two_stage_stub("positive", "0.8").await;
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.two_stage_classify(&instances(1), TwoStageVariant::Plain, "ctx", labels()).await.unwrap();
    let r = &out.records[0];
    assert_eq!(r.score_pos, Some(0.8));
    assert_eq!(r.decision.as_deref(), Some("positive"));
    assert_eq!(r.decision_confidence, Some(0.8));
    assert!(r.extra.contains_key("raw_decision"));
    assert_eq!(stub.requests(), 2);
}

#[tokio::test]
async fn two_stage_negative_decision_takes_complement() {
    let stub = two_stage_stub("negative", "0.8").await;
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.two_stage_classify(&instances(1), TwoStageVariant::Cot, "ctx", labels()).await.unwrap();
    assert!((out.records[0].score_pos.unwrap() - 0.2).abs() < 1e-12);
}

#[tokio::test]
async fn two_stage_bad_confidence_is_flagged() {
    let stub = two_stage_stub("positive", "\"not sure\"").await;
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.two_stage_classify(&instances(1), TwoStageVariant::Plain, "ctx", labels()).await.unwrap();
    let r = &out.records[0];
    assert_eq!(r.score_pos, None);
    assert!(r.flags.contains(&FLAG_MISSING_CONFIDENCE.to_string()));
}

#[tokio::test]
async fn two_stage_unknown_decision_is_flagged() {
    let stub = two_stage_stub("neutral", "0.7").await;
    let gw = Gateway::new(config(stub.url())).unwrap();
    let out = gw.two_stage_classify(&instances(1), TwoStageVariant::Plain, "ctx", labels()).await.unwrap();
    assert!(out.records[0].flags.contains(&FLAG_UNKNOWN_DECISION.to_string()));
}

#[tokio::test]
async fn multiple_predictions_choice_is_seeded() {
    let stub = StubServer::fixed(r#"{"positive-score": [0.11, 0.22, 0.33, 0.44, 0.55]}"#).await.unwrap();
    let t = PromptTemplate::new(TemplateName::MultiplePredictions, "ctx", labels());
    let run = |seed| {
        let cfg = GatewayConfig { seed, ..config(stub.url()) };
        let t = t.clone();
        async move {
            let gw = Gateway::new(cfg).unwrap();
            let out = gw.classify(&instances(8), &t).await.unwrap();
            out.records.iter().map(|r| r.score_pos.unwrap()).collect::<Vec<_>>()
        }
    };
    let a = run(5).await;
    assert_eq!(a, run(5).await);
    assert!(a.iter().all(|s| [0.11, 0.22, 0.33, 0.44, 0.55].contains(s)));
}
