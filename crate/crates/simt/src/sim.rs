//! The incremental decision state machine.
//!
//! A session consumes source words one at a time and applies actions from the
//! extended action space (READ/WRITE plus Drop, Cut, Partial_Summarization,
//! Pronominalization). Emitted target tokens are append-only: any attempt to
//! revise earlier output is rejected with a `<VIOLATION>` error, and per-token
//! delays g(t) (source words read at emission time) are recorded for the
//! latency metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SourceTranscript;

/// Marker recorded when a policy or agent tries to revise committed output.
pub const VIOLATION_MARKER: &str = "<VIOLATION>";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("READ past end of source ({src_len} words already consumed)")]
    SourceExhausted { src_len: usize },
    #[error("{VIOLATION_MARKER}: emitted target tokens are immutable; {msg}")]
    MonotonicityViolation { msg: String },
    #[error("DROP span [{start},{end}] outside read prefix (read_count {read_count})")]
    IllegalDrop {
        start: usize,
        end: usize,
        read_count: usize,
    },
    #[error("action {action} requires a non-empty emission")]
    EmptyEmission { action: &'static str },
    #[error("session already finished")]
    Finished,
    #[error("policy finished with {unread} source words unread")]
    IncompleteSource { unread: usize },
    #[error("no progress after {steps} steps (budget {budget})")]
    NonProgress { steps: usize, budget: usize },
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<SimError>,
    },
    #[error("policy failure: {0}")]
    PolicyFailure(String),
}

impl SimError {
    /// True if this error (possibly wrapped with a step index) is a
    /// prefix-monotonicity violation.
    pub fn is_violation(&self) -> bool {
        match self {
            SimError::MonotonicityViolation { .. } => true,
            SimError::AtStep { source, .. } => source.is_violation(),
            _ => false,
        }
    }
}

/// Target tokens carried by an emitting action.
///
/// `Incremental` appends the given tokens. `FullTarget` restates the whole
/// target so far (the form external agents naturally produce); it must extend
/// the committed output, otherwise the step fails with `<VIOLATION>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emission {
    Incremental(Vec<String>),
    FullTarget(Vec<String>),
}

impl Emission {
    pub fn incremental<I: IntoIterator<Item = S>, S: Into<String>>(tokens: I) -> Self {
        Emission::Incremental(tokens.into_iter().map(Into::into).collect())
    }
}

/// One decision of a policy or agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Read,
    Write(Emission),
    /// Mark a 1-based inclusive range of already-read source words as
    /// intentionally untranslated. Metadata only; never retracts output.
    Drop {
        span: (usize, usize),
    },
    /// Record a sentence boundary at the current target length.
    Cut,
    PartialSummarization(Emission),
    Pronominalization(Emission),
    /// Signal completion. Only legal once the source is exhausted.
    Finish,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Read => "READ",
            Action::Write(_) => "WRITE",
            Action::Drop { .. } => "DROP",
            Action::Cut => "CUT",
            Action::PartialSummarization(_) => "PARTIAL_SUMMARIZATION",
            Action::Pronominalization(_) => "PRONOMINALIZATION",
            Action::Finish => "FINISH",
        }
    }
}

/// Mutable state of one incremental session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionState {
    read_count: usize,
    emitted: Vec<String>,
    delays: Vec<usize>,
    dropped_spans: Vec<(usize, usize)>,
    cut_points: Vec<usize>,
    finished: bool,
}

impl SessionState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read_count(&self) -> usize {
        self.read_count
    }

    pub fn emitted(&self) -> &[String] {
        &self.emitted
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    pub fn dropped_spans(&self) -> &[(usize, usize)] {
        &self.dropped_spans
    }

    pub fn cut_points(&self) -> &[usize] {
        &self.cut_points
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    fn resolve_emission(&self, action: &'static str, e: &Emission) -> Result<Vec<String>, SimError> {
        let delta = match e {
            Emission::Incremental(tokens) => tokens.clone(),
            Emission::FullTarget(full) => {
                if full.len() <= self.emitted.len() || full[..self.emitted.len()] != self.emitted[..]
                {
                    return Err(SimError::MonotonicityViolation {
                        msg: format!(
                            "full target of {} tokens does not extend the {} committed tokens",
                            full.len(),
                            self.emitted.len()
                        ),
                    });
                }
                full[self.emitted.len()..].to_vec()
            }
        };
        if delta.is_empty() {
            return Err(SimError::EmptyEmission { action });
        }
        Ok(delta)
    }
}

/// Apply one action to the session state.
///
/// Errors leave the state untouched; an illegal action can never corrupt a
/// session.
pub fn step(
    state: &mut SessionState,
    action: &Action,
    source: &SourceTranscript,
) -> Result<(), SimError> {
    if state.finished {
        return Err(SimError::Finished);
    }
    match action {
        Action::Read => {
            if state.read_count >= source.len() {
                return Err(SimError::SourceExhausted {
                    src_len: source.len(),
                });
            }
            state.read_count += 1;
        }
        Action::Write(e) | Action::PartialSummarization(e) | Action::Pronominalization(e) => {
            let delta = state.resolve_emission(action.name(), e)?;
            for token in delta {
                state.emitted.push(token);
                state.delays.push(state.read_count);
            }
        }
        Action::Drop { span: (start, end) } => {
            if *start == 0 || start > end || *end > state.read_count {
                return Err(SimError::IllegalDrop {
                    start: *start,
                    end: *end,
                    read_count: state.read_count,
                });
            }
            state.dropped_spans.push((*start, *end));
        }
        Action::Cut => state.cut_points.push(state.emitted.len()),
        Action::Finish => {
            if state.read_count < source.len() {
                return Err(SimError::IncompleteSource {
                    unread: source.len() - state.read_count,
                });
            }
            state.finished = true;
        }
    }
    Ok(())
}

/// Serialized form of one trace step. The on-disk trace format is one JSON
/// object per line; round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emission: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    /// Full-target restatement, for adapters that resend the whole hypothesis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub read_count: Option<usize>,
}

#[derive(Debug, Error)]
pub enum TraceFormatError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace line {line}: unknown action {name:?}")]
    UnknownAction { line: usize, name: String },
}

/// Completed (or aborted) session record: every step, the per-token delay
/// sequence g(t), and the final target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub steps: Vec<TraceStep>,
    pub delays: Vec<usize>,
    pub final_target: Vec<String>,
    pub dropped_spans: Vec<(usize, usize)>,
    pub cut_points: Vec<usize>,
    pub src_len: usize,
}

impl SessionTrace {
    pub fn final_target_string(&self) -> String {
        self.final_target.concat()
    }
}

fn action_to_trace_step(step_no: usize, action: &Action, read_count: usize) -> TraceStep {
    let (emission, span, target) = match action {
        Action::Write(e) | Action::PartialSummarization(e) | Action::Pronominalization(e) => {
            match e {
                Emission::Incremental(t) => (Some(t.clone()), None, None),
                Emission::FullTarget(t) => (None, None, Some(t.clone())),
            }
        }
        Action::Drop { span } => (None, Some(*span), None),
        _ => (None, None, None),
    };
    TraceStep {
        step: step_no,
        action: action.name().to_string(),
        emission,
        span,
        target,
        read_count: Some(read_count),
    }
}

/// Decode one trace step back into an [`Action`].
pub fn action_from_trace_step(ts: &TraceStep, line: usize) -> Result<Action, TraceFormatError> {
    let emission = || -> Result<Emission, TraceFormatError> {
        if let Some(t) = &ts.target {
            Ok(Emission::FullTarget(t.clone()))
        } else if let Some(e) = &ts.emission {
            Ok(Emission::Incremental(e.clone()))
        } else {
            Err(TraceFormatError::Parse {
                line,
                msg: format!("action {} requires an emission or target field", ts.action),
            })
        }
    };
    match ts.action.as_str() {
        "READ" => Ok(Action::Read),
        "WRITE" => Ok(Action::Write(emission()?)),
        "DROP" => {
            let span = ts.span.ok_or_else(|| TraceFormatError::Parse {
                line,
                msg: "DROP requires a span field".to_string(),
            })?;
            Ok(Action::Drop { span })
        }
        "CUT" => Ok(Action::Cut),
        "PARTIAL_SUMMARIZATION" => Ok(Action::PartialSummarization(emission()?)),
        "PRONOMINALIZATION" => Ok(Action::Pronominalization(emission()?)),
        "FINISH" => Ok(Action::Finish),
        name => Err(TraceFormatError::UnknownAction {
            line,
            name: name.to_string(),
        }),
    }
}

/// Serialize a list of actions as the line-delimited trace file format.
pub fn actions_to_trace_file(actions: &[Action]) -> String {
    let mut out = String::new();
    for (i, a) in actions.iter().enumerate() {
        let mut ts = action_to_trace_step(i + 1, a, 0);
        ts.read_count = None;
        out.push_str(&serde_json::to_string(&ts).expect("trace step serializes"));
        out.push('\n');
    }
    out
}

/// Parse a trace file back into actions.
pub fn actions_from_trace_file(content: &str) -> Result<Vec<Action>, TraceFormatError> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let ts: TraceStep = serde_json::from_str(l).map_err(|e| TraceFormatError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            action_from_trace_step(&ts, i + 1)
        })
        .collect()
}

/// What a policy is allowed to see when deciding: only the read prefix, its
/// own committed output, and whether the source has ended.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub prefix: &'a [String],
    pub emitted: &'a [String],
    pub read_count: usize,
    pub source_exhausted: bool,
}

/// A decision function over source prefixes. The driver guarantees the policy
/// never observes words beyond the READ frontier.
pub trait Policy {
    fn decide(&mut self, input: PolicyInput<'_>) -> Result<Action, SimError>;
}

impl<F> Policy for F
where
    F: FnMut(PolicyInput<'_>) -> Result<Action, SimError>,
{
    fn decide(&mut self, input: PolicyInput<'_>) -> Result<Action, SimError> {
        self(input)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Overrides the default step budget of `8 * (|X| + |emitted| + 1)`.
    pub step_budget: Option<usize>,
}

/// Drive `policy` over `source` until the source is exhausted and the policy
/// signals completion. Returns the trace accumulated so far together with
/// the error that stopped the session, if any; the partial trace always
/// satisfies the trace invariants.
pub fn run_session(
    source: &SourceTranscript,
    policy: &mut dyn Policy,
    opts: RunOptions,
) -> (SessionTrace, Option<SimError>) {
    let texts = source.texts();
    let mut state = SessionState::new();
    let mut steps = Vec::new();
    let mut step_no = 0usize;
    let mut failure = None;
    while !state.finished() {
        step_no += 1;
        let budget = opts
            .step_budget
            .unwrap_or(8 * (source.len() + state.emitted.len() + 1));
        if step_no > budget {
            failure = Some(SimError::NonProgress {
                steps: step_no,
                budget,
            });
            break;
        }
        let action = match policy.decide(PolicyInput {
            prefix: &texts[..state.read_count],
            emitted: state.emitted(),
            read_count: state.read_count,
            source_exhausted: state.read_count == source.len(),
        }) {
            Ok(a) => a,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if let Err(e) = step(&mut state, &action, source) {
            failure = Some(SimError::AtStep {
                step: step_no,
                source: Box::new(e),
            });
            break;
        }
        steps.push(action_to_trace_step(step_no, &action, state.read_count));
    }
    let trace = SessionTrace {
        steps,
        delays: state.delays.clone(),
        final_target: state.emitted.clone(),
        dropped_spans: state.dropped_spans.clone(),
        cut_points: state.cut_points.clone(),
        src_len: source.len(),
    };
    (trace, failure)
}

/// [`run_session`] with the partial trace discarded on error.
pub fn run_policy(
    source: &SourceTranscript,
    policy: &mut dyn Policy,
    opts: RunOptions,
) -> Result<SessionTrace, SimError> {
    match run_session(source, policy, opts) {
        (trace, None) => Ok(trace),
        (_, Some(e)) => Err(e),
    }
}

/// Wait-k: READ until k words are consumed, then alternate WRITE and READ;
/// after the source ends, flush whatever the emitter still yields.
///
/// The emitter maps (read prefix, tokens emitted so far) to the next target
/// token, or `None` when it has nothing left.
pub struct WaitK<F> {
    k: usize,
    emitter: F,
    last_was_write: bool,
}

impl<F> WaitK<F>
where
    F: FnMut(&[String], usize) -> Option<String>,
{
    pub fn new(k: usize, emitter: F) -> Self {
        assert!(k >= 1, "wait-k requires k >= 1");
        Self {
            k,
            emitter,
            last_was_write: false,
        }
    }
}

impl<F> Policy for WaitK<F>
where
    F: FnMut(&[String], usize) -> Option<String>,
{
    fn decide(&mut self, input: PolicyInput<'_>) -> Result<Action, SimError> {
        if input.source_exhausted {
            return Ok(match (self.emitter)(input.prefix, input.emitted.len()) {
                Some(tok) => Action::Write(Emission::Incremental(vec![tok])),
                None => Action::Finish,
            });
        }
        if input.read_count < self.k {
            self.last_was_write = false;
            return Ok(Action::Read);
        }
        if self.last_was_write {
            self.last_was_write = false;
            Ok(Action::Read)
        } else {
            match (self.emitter)(input.prefix, input.emitted.len()) {
                Some(tok) => {
                    self.last_was_write = true;
                    Ok(Action::Write(Emission::Incremental(vec![tok])))
                }
                None => {
                    self.last_was_write = false;
                    Ok(Action::Read)
                }
            }
        }
    }
}

/// Emitter that echoes source words one-for-one.
pub fn echo_emitter() -> impl FnMut(&[String], usize) -> Option<String> {
    |prefix: &[String], emitted: usize| prefix.get(emitted).cloned()
}

/// Convenience constructor for wait-k with the echo emitter.
pub fn wait_k_echo(k: usize) -> WaitK<impl FnMut(&[String], usize) -> Option<String>> {
    WaitK::new(k, echo_emitter())
}

/// Replays a fixed action list verbatim; the driver validates legality at
/// each step. An exhausted script finishes if the source is exhausted,
/// otherwise the driver reports the error.
pub struct ScriptedPolicy {
    actions: std::vec::IntoIter<Action>,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<Action>) -> Self {
        Self {
            actions: actions.into_iter(),
        }
    }
}

impl Policy for ScriptedPolicy {
    fn decide(&mut self, _input: PolicyInput<'_>) -> Result<Action, SimError> {
        Ok(self.actions.next().unwrap_or(Action::Finish))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SourceTranscript, TimedWord};
    use proptest::prelude::*;

    fn source(n: usize) -> SourceTranscript {
        let words = (0..n)
            .map(|i| TimedWord {
                text: format!("w{}", i + 1),
                end_s: (i + 1) as f64,
                start_s: None,
            })
            .collect();
        SourceTranscript::new("t", words).unwrap()
    }

    #[test]
    fn first_read_increments_read_count() {
        let src = source(3);
        let mut st = SessionState::new();
        step(&mut st, &Action::Read, &src).unwrap();
        assert_eq!(st.read_count(), 1);
        assert!(st.emitted().is_empty());
    }

    #[test]
    fn write_appends_tokens_with_current_delay() {
        let src = source(5);
        let mut st = SessionState::new();
        for _ in 0..4 {
            step(&mut st, &Action::Read, &src).unwrap();
        }
        step(
            &mut st,
            &Action::Write(Emission::incremental(["该方法", "运行良好"])),
            &src,
        )
        .unwrap();
        assert_eq!(st.emitted(), ["该方法", "运行良好"]);
        assert_eq!(st.delays(), [4, 4]);
    }

    #[test]
    fn drop_beyond_read_prefix_is_illegal() {
        let src = source(5);
        let mut st = SessionState::new();
        step(&mut st, &Action::Read, &src).unwrap();
        step(&mut st, &Action::Read, &src).unwrap();
        let err = step(&mut st, &Action::Drop { span: (3, 3) }, &src).unwrap_err();
        assert!(matches!(err, SimError::IllegalDrop { .. }));
        assert!(st.dropped_spans().is_empty());
    }

    #[test]
    fn read_past_end_errors() {
        let src = source(1);
        let mut st = SessionState::new();
        step(&mut st, &Action::Read, &src).unwrap();
        assert!(matches!(
            step(&mut st, &Action::Read, &src),
            Err(SimError::SourceExhausted { .. })
        ));
    }

    #[test]
    fn full_target_restatement_must_extend_committed_output() {
        let src = source(2);
        let mut st = SessionState::new();
        step(&mut st, &Action::Read, &src).unwrap();
        step(&mut st, &Action::Write(Emission::incremental(["a"])), &src).unwrap();
        // Rewriting token 1 is a monotonicity violation.
        let err = step(
            &mut st,
            &Action::Write(Emission::FullTarget(vec!["b".into(), "c".into()])),
            &src,
        )
        .unwrap_err();
        assert!(err.is_violation());
        assert!(err.to_string().contains(VIOLATION_MARKER));
        // A proper extension is fine.
        step(
            &mut st,
            &Action::Write(Emission::FullTarget(vec!["a".into(), "c".into()])),
            &src,
        )
        .unwrap();
        assert_eq!(st.emitted(), ["a", "c"]);
        assert_eq!(st.delays(), [1, 1]);
    }

    #[test]
    fn wait_k_delays_match_hand_simulation() {
        // Hand-derived oracles for wait-k with the echo emitter.
        for (k, n, expected) in [
            (1usize, 3usize, vec![1, 2, 3]),
            (3, 3, vec![3, 3, 3]),
            (2, 4, vec![2, 3, 4, 4]),
        ] {
            let trace = run_policy(&source(n), &mut wait_k_echo(k), RunOptions::default()).unwrap();
            assert_eq!(trace.delays, expected, "wait-{k} on |X|={n}");
            assert_eq!(trace.final_target.len(), n);
        }
    }

    #[test]
    fn wait_k_larger_than_source_degenerates_to_full_sentence() {
        let trace = run_policy(&source(3), &mut wait_k_echo(7), RunOptions::default()).unwrap();
        assert_eq!(trace.delays, vec![3, 3, 3]);
    }

    #[test]
    fn full_sentence_policy_has_maximal_delays() {
        let mut policy = |input: PolicyInput<'_>| -> Result<Action, SimError> {
            if !input.source_exhausted {
                Ok(Action::Read)
            } else if input.emitted.len() < input.prefix.len() {
                Ok(Action::Write(Emission::incremental([
                    input.prefix[input.emitted.len()].clone()
                ])))
            } else {
                Ok(Action::Finish)
            }
        };
        let trace = run_policy(&source(3), &mut policy, RunOptions::default()).unwrap();
        assert_eq!(trace.delays, vec![3, 3, 3]);
    }

    #[test]
    fn rewriting_policy_aborts_with_violation() {
        let mut policy = |input: PolicyInput<'_>| -> Result<Action, SimError> {
            if input.read_count == 0 {
                Ok(Action::Read)
            } else if input.emitted.is_empty() {
                Ok(Action::Write(Emission::incremental(["x"])))
            } else {
                // Attempt to rewrite token 1.
                Ok(Action::Write(Emission::FullTarget(vec!["y".into(), "z".into()])))
            }
        };
        let err = run_policy(&source(2), &mut policy, RunOptions::default()).unwrap_err();
        assert!(err.is_violation());
    }

    #[test]
    fn empty_script_on_non_empty_source_is_an_error() {
        let err = run_policy(
            &source(3),
            &mut ScriptedPolicy::new(vec![]),
            RunOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SimError::AtStep { step: 1, .. } | SimError::NonProgress { .. }
        ));
    }

    #[test]
    fn scripted_errors_name_the_step_index() {
        let script = vec![Action::Read, Action::Drop { span: (2, 2) }];
        let err = run_policy(
            &source(3),
            &mut ScriptedPolicy::new(script),
            RunOptions::default(),
        )
        .unwrap_err();
        match err {
            SimError::AtStep { step, .. } => assert_eq!(step, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scripted_drop_records_span_without_emission() {
        let script = vec![
            Action::Read,
            Action::Drop { span: (1, 1) },
            Action::Write(Emission::incremental(["ok"])),
            Action::Finish,
        ];
        let trace = run_policy(
            &source(1),
            &mut ScriptedPolicy::new(script),
            RunOptions::default(),
        )
        .unwrap();
        assert_eq!(trace.dropped_spans, vec![(1, 1)]);
        assert_eq!(trace.final_target, ["ok"]);
    }

    #[test]
    fn non_progress_policy_hits_budget() {
        let mut policy = |_: PolicyInput<'_>| Ok(Action::Cut);
        let err = run_policy(&source(2), &mut policy, RunOptions::default()).unwrap_err();
        assert!(matches!(err, SimError::NonProgress { .. }));
    }

    #[test]
    fn trace_file_round_trip_is_exact() {
        let actions = vec![
            Action::Read,
            Action::Write(Emission::incremental(["a", "b"])),
            Action::Drop { span: (1, 1) },
            Action::Cut,
            Action::PartialSummarization(Emission::incremental(["c"])),
            Action::Pronominalization(Emission::FullTarget(vec![
                "a".into(),
                "b".into(),
                "c".into(),
                "它".into(),
            ])),
            Action::Finish,
        ];
        let text = actions_to_trace_file(&actions);
        let back = actions_from_trace_file(&text).unwrap();
        assert_eq!(actions, back);
        assert_eq!(text, actions_to_trace_file(&back));
    }

    #[test]
    fn trace_file_rejects_unknown_actions() {
        let err = actions_from_trace_file("{\"step\":1,\"action\":\"SHOUT\"}\n").unwrap_err();
        assert!(matches!(err, TraceFormatError::UnknownAction { .. }));
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        prop_oneof![
            Just(Action::Read),
            prop::collection::vec("[a-z]{1,3}", 0..3)
                .prop_map(|t| Action::Write(Emission::Incremental(t))),
            prop::collection::vec("[a-z]{1,3}", 0..4)
                .prop_map(|t| Action::Write(Emission::FullTarget(t))),
            (1usize..6, 1usize..6).prop_map(|(a, b)| Action::Drop { span: (a, b) }),
            Just(Action::Cut),
            prop::collection::vec("[a-z]{1,3}", 1..3)
                .prop_map(|t| Action::PartialSummarization(Emission::Incremental(t))),
            Just(Action::Finish),
        ]
    }

    proptest! {
        // Legality closure: random action fuzzing never corrupts a session.
        #[test]
        fn step_preserves_invariants_under_fuzzing(
            actions in prop::collection::vec(arb_action(), 0..40),
            n in 1usize..6,
        ) {
            let src = source(n);
            let mut st = SessionState::new();
            for a in &actions {
                let before = st.clone();
                match step(&mut st, a, &src) {
                    Ok(()) => {}
                    Err(_) => prop_assert_eq!(&st, &before, "failed step must not mutate state"),
                }
                prop_assert!(st.read_count() <= n);
                prop_assert_eq!(st.emitted().len(), st.delays().len());
                prop_assert!(st.delays().windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(st.dropped_spans().iter().all(|&(a, b)| a >= 1 && b <= st.read_count()));
                // Prefix monotonicity: committed output only grows.
                prop_assert!(st.emitted().starts_with(before.emitted()));
            }
        }

        // Causality: two sources sharing the first m words get identical
        // decisions until the step that consumes word m.
        #[test]
        fn wait_k_is_causal_on_shared_prefixes(
            k in 1usize..4,
            shared in 2usize..5,
            extra_a in 0usize..3,
            extra_b in 0usize..3,
        ) {
            let record = |n: usize| -> Vec<String> {
                let src = source(n);
                let mut policy = wait_k_echo(k);
                let mut actions = Vec::new();
                let texts = src.texts();
                let mut st = SessionState::new();
                while !st.finished() && actions.len() < 200 {
                    let a = policy.decide(PolicyInput {
                        prefix: &texts[..st.read_count()],
                        emitted: st.emitted(),
                        read_count: st.read_count(),
                        source_exhausted: st.read_count() == src.len(),
                    }).unwrap();
                    actions.push(format!("{:?}", a));
                    step(&mut st, &a, &src).unwrap();
                }
                actions
            };
            let a = record(shared + extra_a);
            let b = record(shared + extra_b);
            let common = a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count();
            if common < a.len().min(b.len()) {
                // Divergence is only legal once the shorter source has been
                // fully consumed (exhaustion became observable).
                let reads = a[..common].iter().filter(|s| s.contains("Read")).count();
                let shorter = (shared + extra_a).min(shared + extra_b);
                prop_assert!(reads >= shorter, "diverged after {reads} reads, shorter source {shorter}");
            }
        }
    }
}
