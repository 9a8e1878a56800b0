//! Wire protocol for external decision agents.
//!
//! The driver reveals one source word at a time and solicits exactly one
//! decision per `step` tick; the agent answers with an action and, for
//! emitting actions, the incremental tokens (or a full-target restatement).
//! The driver enforces causality (the agent never sees unread words) and
//! prefix monotonicity (revisions abort with `<VIOLATION>`).
//!
//! Framing is one JSON object per line on the agent's standard streams or a
//! local TCP socket.
//!
//! Message grammar, driver to agent:
//!
//! ```text
//! {"type":"session_init","prompt":"...","lang_pair":"En-Zh"}
//! {"type":"source_word","index":1,"text":"We"}
//! {"type":"source_end"}
//! {"type":"step"}
//! {"type":"abort","reason":"..."}
//! ```
//!
//! Agent to driver (one reply per `step`):
//!
//! ```text
//! {"type":"decision","action":"WRITE","emission":["我们"]}
//! {"type":"decision","action":"DROP","span":[9,9]}
//! {"type":"decision","action":"WRITE","target":["我们","将"]}
//! {"type":"finish"}
//! ```

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceTranscript;
use crate::sim::{
    run_session, Action, Emission, Policy, PolicyInput, RunOptions, SessionTrace, SimError,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("protocol error: {msg} (payload {payload:?})")]
    Protocol { msg: String, payload: String },
    #[error("agent timed out after {ms} ms")]
    Timeout { ms: u64 },
    #[error("agent connection closed")]
    Closed,
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("session failed: {source}")]
    Session {
        #[source]
        source: SimError,
        partial: Box<SessionTrace>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DriverMsg {
    SessionInit { prompt: String, lang_pair: String },
    SourceWord { index: usize, text: String },
    SourceEnd,
    Step,
    Abort { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentMsg {
    Decision {
        action: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        emission: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        span: Option<(usize, usize)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Vec<String>>,
    },
    Finish,
}

pub fn encode<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(msg).expect("protocol messages serialize")
}

pub fn decode_agent_msg(line: &str) -> Result<AgentMsg, AgentError> {
    serde_json::from_str(line).map_err(|e| AgentError::Protocol {
        msg: e.to_string(),
        payload: line.to_string(),
    })
}

pub fn decode_driver_msg(line: &str) -> Result<DriverMsg, AgentError> {
    serde_json::from_str(line).map_err(|e| AgentError::Protocol {
        msg: e.to_string(),
        payload: line.to_string(),
    })
}

/// Convert a decoded agent reply into a simulation action.
pub fn agent_msg_to_action(msg: &AgentMsg) -> Result<Action, AgentError> {
    let protocol_err = |m: &str| AgentError::Protocol {
        msg: m.to_string(),
        payload: encode(msg),
    };
    match msg {
        AgentMsg::Finish => Ok(Action::Finish),
        AgentMsg::Decision {
            action,
            emission,
            span,
            target,
        } => {
            let take_emission = || -> Result<Emission, AgentError> {
                if let Some(full) = target {
                    Ok(Emission::FullTarget(full.clone()))
                } else if let Some(inc) = emission {
                    Ok(Emission::Incremental(inc.clone()))
                } else {
                    Err(protocol_err("emitting action without emission or target"))
                }
            };
            match action.as_str() {
                "READ" => Ok(Action::Read),
                "WRITE" => Ok(Action::Write(take_emission()?)),
                "DROP" => {
                    let span = span.ok_or_else(|| protocol_err("DROP without span"))?;
                    Ok(Action::Drop { span })
                }
                "CUT" => Ok(Action::Cut),
                "PARTIAL_SUMMARIZATION" => Ok(Action::PartialSummarization(take_emission()?)),
                "PRONOMINALIZATION" => Ok(Action::Pronominalization(take_emission()?)),
                other => Err(protocol_err(&format!("unknown action name {other:?}"))),
            }
        }
    }
}

/// Transport carrying one message per line in each direction.
pub trait Transport {
    fn send(&mut self, msg: &DriverMsg) -> Result<(), AgentError>;
    fn recv(&mut self, timeout: Duration) -> Result<AgentMsg, AgentError>;
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub timeout_ms: u64,
    pub step_budget: Option<usize>,
    pub prompt: String,
    pub lang_pair: String,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            step_budget: None,
            prompt: String::new(),
            lang_pair: "En-Zh".to_string(),
        }
    }
}

struct ProtocolPolicy<'a> {
    transport: &'a mut dyn Transport,
    timeout: Duration,
    prev_read_count: usize,
    sent_source_end: bool,
    failure: Option<AgentError>,
}

impl ProtocolPolicy<'_> {
    fn solicit(&mut self, input: &PolicyInput<'_>) -> Result<Action, AgentError> {
        if input.read_count > self.prev_read_count {
            // The previous READ was applied; reveal the word it consumed.
            self.transport.send(&DriverMsg::SourceWord {
                index: input.read_count,
                text: input.prefix[input.read_count - 1].clone(),
            })?;
            self.prev_read_count = input.read_count;
        }
        if input.source_exhausted && !self.sent_source_end {
            self.transport.send(&DriverMsg::SourceEnd)?;
            self.sent_source_end = true;
        }
        self.transport.send(&DriverMsg::Step)?;
        let reply = self.transport.recv(self.timeout)?;
        agent_msg_to_action(&reply)
    }
}

impl Policy for ProtocolPolicy<'_> {
    fn decide(&mut self, input: PolicyInput<'_>) -> Result<Action, SimError> {
        match self.solicit(&input) {
            Ok(action) => Ok(action),
            Err(e) => {
                let msg = e.to_string();
                self.failure = Some(e);
                Err(SimError::PolicyFailure(msg))
            }
        }
    }
}

/// Run one full session over the protocol. On any failure the driver sends
/// an abort (best effort) and returns the error together with the partial
/// trace, which still satisfies every trace invariant.
pub fn drive_session(
    source: &SourceTranscript,
    transport: &mut dyn Transport,
    cfg: &SessionConfig,
) -> Result<SessionTrace, AgentError> {
    transport.send(&DriverMsg::SessionInit {
        prompt: cfg.prompt.clone(),
        lang_pair: cfg.lang_pair.clone(),
    })?;
    let mut policy = ProtocolPolicy {
        transport,
        timeout: Duration::from_millis(cfg.timeout_ms),
        prev_read_count: 0,
        sent_source_end: false,
        failure: None,
    };
    let (trace, err) = run_session(
        source,
        &mut policy,
        RunOptions {
            step_budget: cfg.step_budget,
        },
    );
    let transport_failure = policy.failure;
    match err {
        None => Ok(trace),
        Some(sim_err) => {
            let _ = transport.send(&DriverMsg::Abort {
                reason: sim_err.to_string(),
            });
            match transport_failure {
                Some(e) => Err(e),
                None => Err(AgentError::Session {
                    source: sim_err,
                    partial: Box::new(trace),
                }),
            }
        }
    }
}

/// Agent-side message handler: consumes driver messages, replies to `step`.
pub trait AgentHandler {
    fn handle(&mut self, msg: &DriverMsg) -> Option<AgentMsg>;
}

/// In-process transport hosting an [`AgentHandler`]; used for tests and for
/// wrapping local policies behind the wire format.
pub struct InProcessTransport<A> {
    agent: A,
    replies: VecDeque<AgentMsg>,
}

impl<A: AgentHandler> InProcessTransport<A> {
    pub fn new(agent: A) -> Self {
        Self {
            agent,
            replies: VecDeque::new(),
        }
    }

    pub fn into_agent(self) -> A {
        self.agent
    }
}

impl<A: AgentHandler> Transport for InProcessTransport<A> {
    fn send(&mut self, msg: &DriverMsg) -> Result<(), AgentError> {
        if let Some(reply) = self.agent.handle(msg) {
            self.replies.push_back(reply);
        }
        Ok(())
    }

    fn recv(&mut self, _timeout: Duration) -> Result<AgentMsg, AgentError> {
        self.replies.pop_front().ok_or(AgentError::Closed)
    }
}

/// Plays any in-process [`Policy`] as a protocol agent by mirroring the
/// session state from the driver's messages.
pub struct PolicyAgent<P> {
    policy: P,
    prefix: Vec<String>,
    emitted: Vec<String>,
    exhausted: bool,
}

impl<P: Policy> PolicyAgent<P> {
    pub fn new(policy: P) -> Self {
        Self {
            policy,
            prefix: Vec::new(),
            emitted: Vec::new(),
            exhausted: false,
        }
    }

    fn action_to_msg(&mut self, action: &Action) -> AgentMsg {
        let mut emission = None;
        let mut span = None;
        let mut target = None;
        match action {
            Action::Write(e) | Action::PartialSummarization(e) | Action::Pronominalization(e) => {
                match e {
                    Emission::Incremental(t) => {
                        self.emitted.extend(t.iter().cloned());
                        emission = Some(t.clone());
                    }
                    Emission::FullTarget(t) => {
                        self.emitted = t.clone();
                        target = Some(t.clone());
                    }
                }
            }
            Action::Drop { span: s } => span = Some(*s),
            _ => {}
        }
        match action {
            Action::Finish => AgentMsg::Finish,
            _ => AgentMsg::Decision {
                action: action.name().to_string(),
                emission,
                span,
                target,
            },
        }
    }
}

impl<P: Policy> AgentHandler for PolicyAgent<P> {
    fn handle(&mut self, msg: &DriverMsg) -> Option<AgentMsg> {
        match msg {
            DriverMsg::SessionInit { .. } | DriverMsg::Abort { .. } => None,
            DriverMsg::SourceWord { text, .. } => {
                self.prefix.push(text.clone());
                None
            }
            DriverMsg::SourceEnd => {
                self.exhausted = true;
                None
            }
            DriverMsg::Step => {
                let action = self
                    .policy
                    .decide(PolicyInput {
                        prefix: &self.prefix,
                        emitted: &self.emitted,
                        read_count: self.prefix.len(),
                        source_exhausted: self.exhausted,
                    })
                    .ok()?;
                Some(self.action_to_msg(&action))
            }
        }
    }
}

fn line_transport_recv(
    rx: &mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
) -> Result<AgentMsg, AgentError> {
    match rx.recv_timeout(timeout) {
        Ok(Ok(line)) => decode_agent_msg(&line),
        Ok(Err(e)) => Err(AgentError::Io(e)),
        Err(mpsc::RecvTimeoutError::Timeout) => Err(AgentError::Timeout {
            ms: timeout.as_millis() as u64,
        }),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(AgentError::Closed),
    }
}

/// Agent behind a subprocess, one JSON message per line on stdin/stdout.
pub struct SubprocessTransport {
    child: Child,
    stdin: std::process::ChildStdin,
    rx: mpsc::Receiver<std::io::Result<String>>,
}

impl SubprocessTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, AgentError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { child, stdin, rx })
    }
}

impl Transport for SubprocessTransport {
    fn send(&mut self, msg: &DriverMsg) -> Result<(), AgentError> {
        writeln!(self.stdin, "{}", encode(msg))?;
        self.stdin.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<AgentMsg, AgentError> {
        line_transport_recv(&self.rx, timeout)
    }
}

impl Drop for SubprocessTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Agent behind a local TCP socket, same line framing as the subprocess.
pub struct TcpTransport {
    stream: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpTransport {
    pub fn connect(addr: &str) -> Result<Self, AgentError> {
        let stream = TcpStream::connect(addr)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self { stream, reader })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &DriverMsg) -> Result<(), AgentError> {
        writeln!(self.stream, "{}", encode(msg))?;
        Ok(())
    }

    fn recv(&mut self, timeout: Duration) -> Result<AgentMsg, AgentError> {
        self.stream.set_read_timeout(Some(timeout))?;
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Err(AgentError::Closed),
            Ok(_) => decode_agent_msg(line.trim_end()),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                Err(AgentError::Timeout {
                    ms: timeout.as_millis() as u64,
                })
            }
            Err(e) => Err(AgentError::Io(e)),
        }
    }
}
