//! HTTP console for a human supervisor: scene snapshots, trial status, an event stream
//! and a feedback endpoint. Positions at this boundary are camera-frame millimeters.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread;

use anyhow::{Context, Result};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, oneshot};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use surgtwin_core::agent::{
    Action, FailureMode, Feedback, FeedbackRequest, RequestKind, TraceEntry, TrialObserver, TrialRecord,
};
use surgtwin_core::harness::experiment::{make_planner, prepare_trial, run_trial_with};
use surgtwin_core::harness::supervisor::{ConsoleChannel, ConsoleError, InteractiveSupervisor};
use surgtwin_core::harness::{ExperimentConfig, ExperimentSummary, SupervisorConfig};
use surgtwin_core::robot::Jaw;
use surgtwin_core::scene::export::encode_color_png;
use surgtwin_core::{RgbdFrame, SceneRepresentation, Vec3};

pub const PROTOCOL_VERSION: &str = "surgtwin-console/1";

fn mm(v: &Vec3) -> [f64; 3] {
    [v.x * 1000.0, v.y * 1000.0, v.z * 1000.0]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwinView {
    pub id: u32,
    pub label: String,
    pub name: String,
    pub detected: bool,
    pub stale: bool,
    pub position_mm: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingView {
    pub trial: usize,
    pub step: usize,
    pub action: Action,
    pub request: RequestKind,
    pub tooltip_mm: [f64; 3],
    pub pick_failed: bool,
    pub budget_remaining: u8,
}

impl PendingView {
    fn new(trial: usize, r: &FeedbackRequest) -> Self {
        Self {
            trial,
            step: r.step,
            action: r.action.clone(),
            request: r.kind,
            tooltip_mm: mm(&r.tooltip),
            pick_failed: r.pick_failed,
            budget_remaining: r.budget_remaining,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub success: bool,
    pub failure_mode: FailureMode,
    pub reason: Option<String>,
    pub planning_steps: usize,
    pub adjustments_used: u8,
}

impl From<&TrialRecord> for TrialOutcome {
    fn from(r: &TrialRecord) -> Self {
        Self {
            trial: r.trial_index,
            success: r.success,
            failure_mode: r.failure_mode,
            reason: r.failure_reason.clone(),
            planning_steps: r.planning_steps,
            adjustments_used: r.adjustments_used,
        }
    }
}

/// Event-stream messages; the SSE event name is the `type` field.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConsoleEvent {
    Frame { trial: usize, frame_id: u64 },
    Twins { trial: usize, frame_id: u64, twins: Vec<TwinView> },
    Tooltip { trial: usize, position_mm: [f64; 3], jaw: Jaw },
    FeedbackRequest(PendingView),
    Trace { trial: usize, entry: TraceEntry },
    TrialEnd(TrialOutcome),
    SessionEnd { summary: ExperimentSummary },
}

impl ConsoleEvent {
    fn name(&self) -> &'static str {
        match self {
            ConsoleEvent::Frame { .. } => "frame",
            ConsoleEvent::Twins { .. } => "twins",
            ConsoleEvent::Tooltip { .. } => "tooltip",
            ConsoleEvent::FeedbackRequest(_) => "feedback_request",
            ConsoleEvent::Trace { .. } => "trace",
            ConsoleEvent::TrialEnd(_) => "trial_end",
            ConsoleEvent::SessionEnd { .. } => "session_end",
        }
    }
}

#[derive(Debug, Default)]
struct Snapshot {
    trial: usize,
    phase: &'static str,
    steps: usize,
    frame_id: u64,
    frame_png: Option<Vec<u8>>,
    twins: Vec<TwinView>,
    scene_text: String,
    tooltip_mm: Option<[f64; 3]>,
    jaw: Option<Jaw>,
    outcomes: Vec<TrialOutcome>,
    summary: Option<ExperimentSummary>,
}

/// One interactive session: trials run one at a time on a worker thread.
pub struct Console {
    config: ExperimentConfig,
    channel: Arc<ConsoleChannel>,
    state: Mutex<Snapshot>,
    events: broadcast::Sender<String>,
}

impl Console {
    /// Validates the config for interactive use; the supervisor is always the console.
    pub fn new(mut config: ExperimentConfig) -> Result<Arc<Self>> {
        config.supervisor = SupervisorConfig::Interactive;
        config.validate()?;
        let (events, _) = broadcast::channel(1024);
        Ok(Arc::new(Self {
            config,
            channel: ConsoleChannel::new(),
            state: Mutex::new(Snapshot {
                phase: "starting",
                ..Default::default()
            }),
            events,
        }))
    }

    fn snapshot(&self) -> std::sync::MutexGuard<'_, Snapshot> {
        self.state.lock().expect("console state lock")
    }

    fn publish(&self, event: ConsoleEvent) {
        let mut doc = serde_json::to_value(&event).expect("events serialize");
        doc["version"] = json!(PROTOCOL_VERSION);
        // no subscribers is fine
        let _ = self.events.send(format!("{}\n{}", event.name(), doc));
    }

    /// Runs every configured trial on a new thread.
    pub fn start(self: &Arc<Self>) -> thread::JoinHandle<Vec<TrialRecord>> {
        let console = Arc::clone(self);
        thread::spawn(move || console.run())
    }

    fn run(self: Arc<Self>) -> Vec<TrialRecord> {
        let mut records = Vec::new();
        for index in 0..self.config.trials {
            {
                let mut s = self.snapshot();
                s.trial = index;
                s.phase = "running";
                s.steps = 0;
            }
            let record = match self.run_one(index) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("trial {index} could not start: {e:#}");
                    TrialRecord::aborted(index, 0, String::new(), format!("{e:#}"))
                }
            };
            let outcome = TrialOutcome::from(&record);
            self.snapshot().outcomes.push(outcome.clone());
            self.publish(ConsoleEvent::TrialEnd(outcome));
            records.push(record);
        }
        let summary = ExperimentSummary::from_records(&records);
        {
            let mut s = self.snapshot();
            s.phase = "finished";
            s.summary = Some(summary.clone());
        }
        self.publish(ConsoleEvent::SessionEnd { summary });
        records
    }

    fn run_one(self: &Arc<Self>, index: usize) -> Result<TrialRecord> {
        let setup = prepare_trial(&self.config, index)?;
        let mut planner = make_planner(&self.config.planner)?;
        let hook_console = Arc::clone(self);
        let mut supervisor = InteractiveSupervisor::new(self.channel.clone()).on_request(move |r| {
            hook_console.publish(ConsoleEvent::FeedbackRequest(PendingView::new(index, r)));
        });
        let mut observer = Observer {
            console: Arc::clone(self),
            trial: index,
        };
        Ok(run_trial_with(&setup, planner.as_mut(), &mut supervisor, &mut observer))
    }

    /// Ends the session; a trial waiting for feedback gives up.
    pub fn close(&self) {
        self.channel.close();
    }

    pub fn status(&self) -> Value {
        let pending = self.channel.pending();
        let s = self.snapshot();
        let phase = if pending.is_some() { "awaiting_feedback" } else { s.phase };
        json!({
            "version": PROTOCOL_VERSION,
            "trial": s.trial,
            "trials": self.config.trials,
            "phase": phase,
            "steps": s.steps,
            "tooltip_mm": s.tooltip_mm,
            "jaw": s.jaw,
            "pending": pending.map(|r| PendingView::new(s.trial, &r)),
            "outcomes": s.outcomes,
            "summary": s.summary,
        })
    }

    pub fn scene(&self) -> Value {
        let s = self.snapshot();
        json!({
            "version": PROTOCOL_VERSION,
            "trial": s.trial,
            "frame_id": s.frame_id,
            "twins": s.twins,
            "tooltip_mm": s.tooltip_mm,
            "scene": s.scene_text,
            "frame_png_base64": s.frame_png.as_ref().map(|p| base64::engine::general_purpose::STANDARD.encode(p)),
        })
    }

    pub fn submit(&self, feedback: Feedback) -> Result<(), ConsoleError> {
        self.channel.submit(feedback)
    }
}

struct Observer {
    console: Arc<Console>,
    trial: usize,
}

impl TrialObserver for Observer {
    fn on_observation(&mut self, frame: &RgbdFrame, scene: &SceneRepresentation) {
        let twins: Vec<TwinView> = scene
            .twins
            .iter()
            .map(|t| TwinView {
                id: t.object_id,
                label: t.label.clone(),
                name: t.name.clone(),
                detected: t.detected,
                stale: t.stale,
                position_mm: t.pose.map(|p| mm(p.translation())),
            })
            .collect();
        let png = match encode_color_png(frame) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("frame {} not encoded: {e}", frame.frame_id);
                None
            }
        };
        {
            let mut s = self.console.snapshot();
            s.frame_id = frame.frame_id;
            s.frame_png = png;
            s.twins = twins.clone();
            s.scene_text = surgtwin_core::twin::serialize_scene(scene);
        }
        self.console.publish(ConsoleEvent::Frame {
            trial: self.trial,
            frame_id: frame.frame_id,
        });
        self.console.publish(ConsoleEvent::Twins {
            trial: self.trial,
            frame_id: frame.frame_id,
            twins,
        });
    }

    fn on_trace(&mut self, entry: &TraceEntry) {
        self.console.snapshot().steps = entry.step;
        self.console.publish(ConsoleEvent::Trace {
            trial: self.trial,
            entry: entry.clone(),
        });
    }

    fn on_tooltip(&mut self, tooltip: &Vec3, jaw: Jaw) {
        {
            let mut s = self.console.snapshot();
            s.tooltip_mm = Some(mm(tooltip));
            s.jaw = Some(jaw);
        }
        self.console.publish(ConsoleEvent::Tooltip {
            trial: self.trial,
            position_mm: mm(tooltip),
            jaw,
        });
    }
}

fn error_response(status: StatusCode, error: &str, message: String) -> Response {
    let body = json!({"version": PROTOCOL_VERSION, "error": error, "message": message});
    (status, Json(body)).into_response()
}

async fn get_status(State(c): State<Arc<Console>>) -> Json<Value> {
    Json(c.status())
}

async fn get_scene(State(c): State<Arc<Console>>) -> Json<Value> {
    Json(c.scene())
}

async fn get_frame(State(c): State<Arc<Console>>) -> Response {
    match c.snapshot().frame_png.clone() {
        Some(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        None => error_response(StatusCode::NOT_FOUND, "no_frame", "no frame has been captured yet".into()),
    }
}

async fn post_feedback(State(c): State<Arc<Console>>, body: String) -> Response {
    let feedback: Feedback = match serde_json::from_str(&body) {
        Ok(f) => f,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, "malformed", e.to_string()),
    };
    match c.submit(feedback.clone()) {
        Ok(()) => (
            StatusCode::ACCEPTED,
            Json(json!({"version": PROTOCOL_VERSION, "accepted": feedback})),
        )
            .into_response(),
        Err(e) => {
            let code = match e {
                ConsoleError::NoPendingRequest => "no_pending_request",
                ConsoleError::BudgetExhausted => "budget_exhausted",
                ConsoleError::Closed => "closed",
            };
            error_response(StatusCode::CONFLICT, code, e.to_string())
        }
    }
}

async fn get_events(State(c): State<Arc<Console>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = BroadcastStream::new(c.events.subscribe()).filter_map(|msg| {
        let msg = msg.ok()?;
        let (name, data) = msg.split_once('\n')?;
        Some(Ok(Event::default().event(name).data(data)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

pub fn router(console: Arc<Console>) -> Router {
    Router::new()
        .route("/status", get(get_status))
        .route("/scene", get(get_scene))
        .route("/frame.png", get(get_frame))
        .route("/events", get(get_events))
        .route("/feedback", post(post_feedback))
        .with_state(console)
}

/// A console bound to an address and serving on its own thread.
pub struct RunningConsole {
    pub addr: SocketAddr,
    pub console: Arc<Console>,
    trials: Option<thread::JoinHandle<Vec<TrialRecord>>>,
    shutdown: Option<oneshot::Sender<()>>,
    server: Option<thread::JoinHandle<()>>,
}

impl RunningConsole {
    /// Blocks until every trial has finished and returns their records.
    pub fn wait_trials(&mut self) -> Vec<TrialRecord> {
        self.trials
            .take()
            .map(|h| h.join().expect("trial thread panicked"))
            .unwrap_or_default()
    }

    /// Blocks until the HTTP server stops.
    pub fn wait_server(&mut self) {
        if let Some(h) = self.server.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RunningConsole {
    fn drop(&mut self) {
        self.console.close();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait_server();
    }
}

/// Binds `bind`, starts the trial worker and serves the console until dropped.
pub fn start(config: ExperimentConfig, bind: &str) -> Result<RunningConsole> {
    let console = Console::new(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .context("building the async runtime")?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(bind))
        .with_context(|| format!("binding {bind}"))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(Arc::clone(&console));
    let server = thread::spawn(move || {
        runtime.block_on(async move {
            let shutdown = async move {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
                log::error!("console server stopped: {e}");
            }
        });
        // open event streams would otherwise keep the runtime alive
        runtime.shutdown_background();
    });
    let trials = console.start();
    Ok(RunningConsole {
        addr,
        console,
        trials: Some(trials),
        shutdown: Some(tx),
        server: Some(server),
    })
}
