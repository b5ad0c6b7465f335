//! Chat-completion planner with strict single-action responses.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::protocol::ProtocolState;
use super::{Action, Direction, Planner, PlannerContext, PlannerError, ReachMode};

pub const ENV_TOKEN: &str = "SURGTWIN_LLM_TOKEN";
pub const DEFAULT_MODEL: &str = "gpt-4o";

/// Re-prompts after a malformed response.
pub const MAX_RETRIES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

pub trait ChatTransport: Send + Sync {
    /// Returns the assistant message content.
    fn complete(&self, request: &ChatRequest) -> Result<String, String>;
}

/// OpenAI-style `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Self {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }

    /// The bearer token, if any, comes from the environment.
    pub fn with_env_token(endpoint: impl Into<String>) -> Self {
        let token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        Self::new(endpoint, token, Duration::from_secs(60))
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, String> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(request).map_err(|e| format!("{}: {e}", self.endpoint))?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("unreadable response body: {e}"))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

/// Scripted endpoint for tests: answers from a queue and records every request.
#[derive(Debug, Default)]
pub struct StubTransport {
    responses: Mutex<VecDeque<String>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl StubTransport {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("stub lock").clone()
    }
}

impl ChatTransport for StubTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, String> {
        self.requests.lock().expect("stub lock").push(request.clone());
        self.responses
            .lock()
            .expect("stub lock")
            .pop_front()
            .ok_or_else(|| "stub endpoint has no scripted responses left".to_string())
    }
}

const RESPONSE_SCHEMA: &str = r#"Respond with exactly one JSON object and nothing else:
{"action": "<action name>", "arguments": {...}, "rationale": "<one sentence>"}
Arguments: ReachTarget {"object_id": <integer>, "mode": "pick" | "place"}; AdjustPosition {"direction": "up" | "down" | "left" | "right" | "forward" | "back"}; Inquiry {"question": "<text>"}; all other actions take {}."#;

fn arguments(obj: &Map<String, Value>) -> Result<Map<String, Value>, String> {
    match obj.get("arguments") {
        None | Some(Value::Null) => Ok(Map::new()),
        Some(Value::Object(m)) => Ok(m.clone()),
        Some(other) => Err(format!("`arguments` must be an object, got {other}")),
    }
}

fn str_arg<'a>(args: &'a Map<String, Value>, key: &str, action: &str) -> Result<&'a str, String> {
    args.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| format!("{action} requires a string argument `{key}`"))
}

/// Parses one response document into an action and its rationale.
pub fn parse_response(text: &str) -> Result<(Action, Option<String>), String> {
    let start = text.find('{').ok_or("response contains no JSON object")?;
    let end = text.rfind('}').ok_or("response contains no JSON object")?;
    if end < start {
        return Err("response contains no JSON object".into());
    }
    let value: Value = serde_json::from_str(&text[start..=end]).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("response is not a JSON object")?;
    let name = obj
        .get("action")
        .and_then(Value::as_str)
        .ok_or("missing string field `action`")?;
    let args = arguments(obj)?;
    let action = match name {
        "GetObservations" => Action::GetObservations,
        "PickTarget" => Action::PickTarget,
        "ReleaseObject" => Action::ReleaseObject,
        "ReachTarget" => {
            let id = args
                .get("object_id")
                .and_then(Value::as_u64)
                .and_then(|v| u32::try_from(v).ok())
                .ok_or("ReachTarget requires a non-negative integer `object_id`")?;
            let mode = match str_arg(&args, "mode", name)? {
                "pick" => ReachMode::Pick,
                "place" => ReachMode::Place,
                other => return Err(format!("ReachTarget mode must be `pick` or `place`, got `{other}`")),
            };
            Action::ReachTarget { object_id: id, mode }
        }
        "AdjustPosition" => Action::AdjustPosition {
            direction: str_arg(&args, "direction", name)?.parse::<Direction>()?,
        },
        "Inquiry" => Action::Inquiry {
            question: str_arg(&args, "question", name)?.to_string(),
        },
        other => {
            return Err(format!(
                "unknown action `{other}`; valid actions are GetObservations, ReachTarget, PickTarget, ReleaseObject, AdjustPosition, Inquiry"
            ))
        }
    };
    let rationale = obj.get("rationale").and_then(Value::as_str).map(str::to_string);
    Ok((action, rationale))
}

pub struct LlmPlanner {
    transport: Arc<dyn ChatTransport>,
    pub model: String,
}

impl LlmPlanner {
    pub fn new(transport: Arc<dyn ChatTransport>, model: impl Into<String>) -> Self {
        Self {
            transport,
            model: model.into(),
        }
    }

    pub fn messages(ctx: &PlannerContext, state: &ProtocolState) -> Vec<ChatMessage> {
        let system = format!(
            "You control a surgical robot arm through a fixed set of actions. \
             Plan one action at a time toward the task. Never invent actions or object ids.\n\n{}\n\n{RESPONSE_SCHEMA}",
            ctx.available_actions
        );
        let mut history = String::from("Action history:\n");
        if ctx.history.is_empty() {
            history.push_str("(none)\n");
        }
        for (i, h) in ctx.history.iter().enumerate() {
            history.push_str(&format!("{}. {} -> {}", i + 1, h.action, h.outcome));
            if let Some(f) = &h.feedback {
                history.push_str(&format!(" [supervisor: {f}]"));
            }
            history.push('\n');
        }
        let loop_mode = match ctx.loop_mode {
            super::LoopMode::Open => "open loop (no supervisor feedback)",
            super::LoopMode::Closed => "closed loop (a supervisor reviews reach and pick actions)",
        };
        let feedback = match ctx.latest_feedback() {
            Some(f) => format!("Latest supervisor feedback: {f}"),
            None => "Latest supervisor feedback: none".to_string(),
        };
        vec![
            ChatMessage::new("system", system),
            ChatMessage::new("user", format!("Task: {}\nMode: {loop_mode}", ctx.task_command)),
            ChatMessage::new("user", format!("Scene representation:\n{}", ctx.scene)),
            ChatMessage::new(
                "user",
                format!(
                    "{history}Adjustment budget remaining: {}",
                    state.adjust_budget_remaining
                ),
            ),
            ChatMessage::new("user", format!("{feedback}\nWhat is the next action?")),
        ]
    }
}

impl Planner for LlmPlanner {
    fn next_action(&mut self, ctx: &PlannerContext, state: &ProtocolState) -> Result<Action, PlannerError> {
        let mut request = ChatRequest {
            model: self.model.clone(),
            messages: Self::messages(ctx, state),
            temperature: 0.0,
        };
        let mut last_error = String::new();
        for attempt in 0..=MAX_RETRIES {
            let reply = self.transport.complete(&request).map_err(PlannerError::Transport)?;
            match parse_response(&reply) {
                Ok((action, rationale)) => {
                    if let Some(r) = rationale {
                        log::debug!("planner rationale for {action}: {r}");
                    }
                    return Ok(action);
                }
                Err(e) => {
                    log::warn!("malformed planner response (attempt {}): {e}", attempt + 1);
                    request.messages.push(ChatMessage::new("assistant", reply));
                    request.messages.push(ChatMessage::new(
                        "user",
                        format!("Your response could not be parsed: {e}. Reply again with exactly one JSON object."),
                    ));
                    last_error = e;
                }
            }
        }
        Err(PlannerError::Malformed {
            attempts: MAX_RETRIES + 1,
            last_error,
        })
    }
}
