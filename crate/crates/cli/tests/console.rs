use std::io::{BufRead, BufReader};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use surgtwin_cli::console::{self, RunningConsole, PROTOCOL_VERSION};
use surgtwin_core::agent::FailureMode;
use surgtwin_core::harness::ExperimentConfig;
use surgtwin_core::robot::ADJUST_STEP;
use surgtwin_core::MotionConfig;

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(30)))
        .build()
        .into()
}

fn start(trials: usize) -> RunningConsole {
    let cfg = ExperimentConfig {
        trials,
        motion: MotionConfig {
            execution_noise_sigma: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    console::start(cfg, "127.0.0.1:0").unwrap()
}

struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    fn new(c: &RunningConsole) -> Self {
        Self {
            agent: agent(),
            base: format!("http://{}", c.addr),
        }
    }

    fn get(&self, path: &str) -> Value {
        let mut r = self.agent.get(format!("{}{path}", self.base)).call().unwrap();
        assert_eq!(r.status().as_u16(), 200, "GET {path}");
        serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap()
    }

    fn feedback(&self, body: &str) -> (u16, Value) {
        let mut r = self
            .agent
            .post(format!("{}/feedback", self.base))
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        let status = r.status().as_u16();
        (status, serde_json::from_str(&r.body_mut().read_to_string().unwrap()).unwrap())
    }

    /// Waits for a pending request newer than `after`, or for the session to finish.
    fn next_pending(&self, after: Option<(usize, usize)>) -> Option<Value> {
        let deadline = Instant::now() + Duration::from_secs(60);
        while Instant::now() < deadline {
            let status = self.get("/status");
            let pending = &status["pending"];
            if !pending.is_null() && after.is_none_or(|s| key(pending) > s) {
                return Some(pending.clone());
            }
            if status["phase"] == "finished" {
                return None;
            }
            thread::sleep(Duration::from_millis(5));
        }
        panic!("no feedback request within 60 s");
    }

    fn wait_finished(&self) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let status = self.get("/status");
            if status["phase"] == "finished" {
                return status;
            }
            assert!(Instant::now() < deadline, "session did not finish");
            thread::sleep(Duration::from_millis(5));
        }
    }
}

/// Orders requests across trials.
fn key(p: &Value) -> (usize, usize) {
    (p["trial"].as_u64().unwrap() as usize, p["step"].as_u64().unwrap() as usize)
}

fn tooltip(p: &Value) -> [f64; 3] {
    let t = p["tooltip_mm"].as_array().unwrap();
    [0, 1, 2].map(|i| t[i].as_f64().unwrap())
}

#[test]
fn adjust_left_moves_the_tooltip_three_millimeters() {
    let c = start(1);
    let client = Client::new(&c);
    let first = client.next_pending(None).unwrap();
    assert_eq!(first["request"]["kind"], "after_reach");
    assert_eq!(first["budget_remaining"], 5);
    let before = tooltip(&first);

    let (code, body) = client.feedback(r#"{"kind":"adjust","direction":"left"}"#);
    assert_eq!(code, 202, "{body}");
    assert_eq!(body["version"], PROTOCOL_VERSION);

    let after = client.next_pending(Some(key(&first))).unwrap();
    assert_eq!(after["request"]["kind"], "after_adjust");
    assert_eq!(after["budget_remaining"], 4);
    let moved = tooltip(&after);
    assert!((moved[0] - before[0] + ADJUST_STEP * 1000.0).abs() < 1e-9, "{before:?} -> {moved:?}");
    assert!((moved[1] - before[1]).abs() < 1e-9 && (moved[2] - before[2]).abs() < 1e-9);
}

#[test]
fn confirm_proceeds_and_the_trial_completes() {
    let mut c = start(1);
    let client = Client::new(&c);
    let mut last = None;
    let mut requests = 0;
    while let Some(p) = client.next_pending(last) {
        if let Some(s) = last {
            assert!(key(&p) > s);
        }
        last = Some(key(&p));
        requests += 1;
        assert_eq!(client.feedback(r#"{"kind":"confirm"}"#).0, 202);
    }
    assert!(requests >= 2, "only {requests} requests");
    let status = client.wait_finished();
    assert_eq!(status["outcomes"][0]["success"], true, "{status}");
    assert_eq!(status["summary"]["trial_count"], 1, "{status}");
    let records = c.wait_trials();
    assert!(records[0].success);
    assert_eq!(records[0].adjustments_used, 0);
}

#[test]
fn sixth_adjust_is_rejected_and_fails_the_trial() {
    let mut c = start(1);
    let client = Client::new(&c);
    let mut last = None;
    for i in 0..5 {
        let p = client.next_pending(last).unwrap();
        assert_eq!(p["budget_remaining"], 5 - i);
        last = Some(key(&p));
        assert_eq!(client.feedback(r#"{"kind":"adjust","direction":"up"}"#).0, 202);
    }
    let p = client.next_pending(last).unwrap();
    assert_eq!(p["budget_remaining"], 0);
    let (code, body) = client.feedback(r#"{"kind":"adjust","direction":"up"}"#);
    assert_eq!(code, 409);
    assert_eq!(body["error"], "budget_exhausted");

    let records = c.wait_trials();
    assert!(!records[0].success);
    assert_eq!(records[0].failure_mode, FailureMode::Po);
    assert_eq!(records[0].adjustments_used, 5);
    let status = client.wait_finished();
    assert_eq!(status["outcomes"][0]["failure_mode"], "Po");
}

#[test]
fn bad_feedback_is_rejected() {
    let c = start(1);
    let client = Client::new(&c);
    let first = client.next_pending(None).unwrap();
    for body in [r#"{"kind":"adjust","direction":"sideways"}"#, "not json", r#"{"kind":"retry"}"#] {
        let (code, reply) = client.feedback(body);
        assert_eq!(code, 400, "{body}");
        assert_eq!(reply["error"], "malformed");
    }
    // rejected input leaves the request open
    assert_eq!(client.get("/status")["pending"]["step"], first["step"]);

    assert_eq!(client.feedback(r#"{"kind":"confirm"}"#).0, 202);
    let (code, reply) = client.feedback(r#"{"kind":"confirm"}"#);
    if code != 202 {
        // the trial had not yet asked again
        assert_eq!(code, 409);
        assert_eq!(reply["error"], "no_pending_request");
    }
    while client.next_pending(None).is_some() {
        let _ = client.feedback(r#"{"kind":"confirm"}"#);
    }
    let (code, reply) = client.feedback(r#"{"kind":"confirm"}"#);
    assert_eq!(code, 409);
    assert_eq!(reply["error"], "no_pending_request");
}

#[test]
fn scene_and_frame_are_served() {
    let c = start(1);
    let client = Client::new(&c);
    client.next_pending(None).unwrap();
    let scene = client.get("/scene");
    assert_eq!(scene["version"], PROTOCOL_VERSION);
    let twins = scene["twins"].as_array().unwrap();
    assert!(twins.iter().any(|t| t["label"] == "block" && t["detected"] == true), "{scene}");
    // camera is about 45 cm above the board
    let z = twins[0]["position_mm"][2].as_f64().unwrap();
    assert!((300.0..600.0).contains(&z), "{z}");
    assert!(scene["scene"].as_str().unwrap().contains("block_"));
    assert!(scene["frame_png_base64"].as_str().unwrap().starts_with("iVBORw0KGgo"));

    let mut r = client.agent.get(format!("{}/frame.png", client.base)).call().unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.headers()["content-type"], "image/png");
    let png = r.body_mut().read_to_vec().unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn event_stream_reports_the_session() {
    let c = start(2);
    let client = Client::new(&c);
    let first = client.next_pending(None).unwrap();

    let url = format!("{}/events", client.base);
    let (tx, rx) = std::sync::mpsc::channel();
    thread::spawn(move || {
        let r = agent().get(url).call().unwrap();
        let mut name = String::new();
        for line in BufReader::new(r.into_body().into_reader()).lines() {
            let Ok(line) = line else { break };
            if let Some(n) = line.strip_prefix("event:") {
                name = n.trim().to_string();
            } else if let Some(d) = line.strip_prefix("data:") {
                let data: Value = serde_json::from_str(d.trim()).unwrap();
                let end = name == "session_end";
                if tx.send((name.clone(), data)).is_err() || end {
                    break;
                }
            }
        }
    });
    // the stream only sees events after it connects
    thread::sleep(Duration::from_millis(200));
    let mut last = Some(key(&first));
    assert_eq!(client.feedback(r#"{"kind":"adjust","direction":"right"}"#).0, 202);
    while let Some(p) = client.next_pending(last) {
        last = Some(key(&p));
        client.feedback(r#"{"kind":"confirm"}"#);
    }

    let mut events = Vec::new();
    while let Ok(e) = rx.recv_timeout(Duration::from_secs(30)) {
        let end = e.0 == "session_end";
        events.push(e);
        if end {
            break;
        }
    }
    let names: Vec<&str> = events.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["tooltip", "trace", "feedback_request", "frame", "twins", "trial_end", "session_end"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    assert!(events.iter().all(|(n, d)| d["version"] == PROTOCOL_VERSION && d["type"] == json!(n)));
    let request = &events.iter().find(|(n, _)| n == "feedback_request").unwrap().1;
    assert_eq!(request["request"]["kind"], "after_adjust");
    assert_eq!(request["budget_remaining"], 4);
    assert_eq!(names.last(), Some(&"session_end"));
}
