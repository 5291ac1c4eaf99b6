//! Stage 2: the adversarial debate between the generative hypothesis agent
//! (GHA) and the natural mechanism agent (NMA), one debate per trace.
//!
//! Each round runs four turns in a fixed order:
//!
//! 1. GHA challenges the natural hypothesis
//! 2. NMA responds (rebuts or concedes)
//! 3. NMA challenges the generative hypothesis
//! 4. GHA responds
//!
//! The first concession, unrecoverable schema failure, or unanswered
//! challenge ends the debate and the speaker loses: a GHA loss resolves the
//! trace to -1 (natural), an NMA loss to +1 (generative). If every round
//! completes with both sides maintaining, the trace is unresolved and goes
//! to explanatory-cost adjudication.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Message, Session, Stage};
use crate::domain::{Hypothesis, Stance, Trace};
use crate::knowledge::RetrievalResult;
use crate::schema::{chat_structured, extract_object, Fields, SchemaError, StructuredCall, StructuredError};
use crate::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Agent {
    #[serde(rename = "GHA")]
    Gha,
    #[serde(rename = "NMA")]
    Nma,
}

impl Agent {
    pub fn as_str(self) -> &'static str {
        match self {
            Agent::Gha => "GHA",
            Agent::Nma => "NMA",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Agent::Gha => "gha",
            Agent::Nma => "nma",
        }
    }

    /// Signal value when this agent loses.
    pub fn loss_value(self) -> i8 {
        match self {
            Agent::Gha => -1,
            Agent::Nma => 1,
        }
    }

    pub fn opponent(self) -> Agent {
        match self {
            Agent::Gha => Agent::Nma,
            Agent::Nma => Agent::Gha,
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnStatus {
    Maintain,
    Concede,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnKind {
    Challenge,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateTurn {
    pub agent: Agent,
    pub round: u32,
    pub kind: TurnKind,
    pub argument: String,
    pub challenge: String,
    pub rebuttal: String,
    pub status: TurnStatus,
    #[serde(default)]
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DebateOutcome {
    Resolved { value: i8 },
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReason {
    Conceded,
    SchemaFailure,
    EmptyRebuttal,
}

/// Why and where a debate ended early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Termination {
    pub loser: Agent,
    pub reason: LossReason,
    /// 0 for the opening statements.
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateRecord {
    pub trace_id: String,
    pub turns: Vec<DebateTurn>,
    pub outcome: DebateOutcome,
    pub hypothesis_gen: Hypothesis,
    pub hypothesis_nat: Hypothesis,
    pub rounds_used: u32,
    pub kb_context_digest: String,
    pub template_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
}

impl DebateRecord {
    /// Plain-text transcript used as the debate trajectory for compression.
    pub fn transcript(&self) -> String {
        let mut s = format!(
            "Opening, GHA: {}\n  assumptions: {}\nOpening, NMA: {}\n  assumptions: {}\n",
            self.hypothesis_gen.statement,
            self.hypothesis_gen.assumptions.join("; "),
            self.hypothesis_nat.statement,
            self.hypothesis_nat.assumptions.join("; ")
        );
        for t in &self.turns {
            s.push_str(&format!("Round {}, {} {:?}: {}", t.round, t.agent, t.kind, t.argument));
            if !t.challenge.is_empty() {
                s.push_str(&format!("\n  challenge: {}", t.challenge));
            }
            if !t.rebuttal.is_empty() {
                s.push_str(&format!("\n  rebuttal: {}", t.rebuttal));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebateConfig {
    pub max_rounds: u32,
    pub parse_retries: u32,
    pub temperature: f64,
}

impl Default for DebateConfig {
    fn default() -> Self {
        DebateConfig { max_rounds: 2, parse_retries: 1, temperature: 0.0 }
    }
}

#[derive(Debug, Error)]
pub enum DebateError {
    #[error("max_rounds must be at least 1")]
    ZeroRounds,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Parses one structured turn reply and enforces the turn invariants.
pub fn parse_turn(raw: &str, agent: Agent, round: u32, kind: TurnKind) -> Result<DebateTurn, SchemaError> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map);
    let status = f.string("status");
    let argument = f.string_or_empty("argument");
    let challenge = f.string_or_empty("challenge");
    let rebuttal = f.string_or_empty("rebuttal");
    let assumptions = f.string_list("assumptions");
    let status = match status.as_deref().map(|s| s.trim().to_ascii_lowercase()) {
        Some(s) if s == "maintain" => Some(TurnStatus::Maintain),
        Some(s) if s == "concede" => Some(TurnStatus::Concede),
        Some(other) => {
            f.problems.push(format!("unknown status `{other}`"));
            None
        }
        None => None,
    };
    if status == Some(TurnStatus::Maintain) && argument.trim().is_empty() {
        f.problems.push("`argument` is required when status is maintain".into());
    }
    f.finish()?;
    Ok(DebateTurn {
        agent,
        round,
        kind,
        argument,
        challenge,
        rebuttal,
        status: status.expect("status checked above"),
        assumptions,
    })
}

fn parse_hypothesis(raw: &str, stance: Stance) -> Result<Hypothesis, SchemaError> {
    let map = extract_object(raw)?;
    let mut f = Fields::new(&map);
    let statement = f.nonempty_string("statement");
    let assumptions = f.string_list("assumptions");
    f.finish()?;
    Ok(Hypothesis { stance, statement: statement.unwrap_or_default(), assumptions })
}

fn placeholder(stance: Stance) -> Hypothesis {
    Hypothesis { stance, statement: "(no valid hypothesis was produced)".into(), assumptions: Vec::new() }
}

struct Thread {
    agent: Agent,
    messages: Vec<Message>,
}

impl Thread {
    fn new(agent: Agent, opening_prompt: String) -> Self {
        let system = match agent {
            Agent::Gha => templates::GHA.text,
            Agent::Nma => templates::NMA.text,
        };
        Thread { agent, messages: vec![Message::system(system), Message::user(opening_prompt)] }
    }
}

fn structured<T>(
    session: &mut Session<'_>,
    thread: &mut Thread,
    label: String,
    config: &DebateConfig,
    parse: impl Fn(&str) -> Result<T, SchemaError>,
) -> Result<Result<T, SchemaError>, BackendError> {
    let call = StructuredCall {
        stage: Stage::Debate,
        label,
        messages: &thread.messages,
        temperature: config.temperature,
        attachments: Vec::new(),
        retries: config.parse_retries,
    };
    match chat_structured(session, call, parse) {
        Ok(s) => {
            thread.messages.push(Message::assistant(s.raw));
            Ok(Ok(s.value))
        }
        Err(StructuredError::Schema { source, .. }) => Ok(Err(source)),
        Err(StructuredError::Backend(e)) => Err(e),
    }
}

fn opening_prompt(trace: &Trace, kb: &RetrievalResult, context: &str) -> String {
    let frames = trace.frame_indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ");
    format!(
        "Scene: {context}\nTrace {} ({:?}; frames [{frames}]): {}\n{}\nState your opening hypothesis for this trace.",
        trace.trace_id,
        trace.category,
        trace.description,
        kb.render()
    )
}

/// Both agents form their opening hypotheses independently. A side whose
/// reply fails validation after the configured retries gets an `Err`.
pub struct Openings {
    pub gen: Result<Hypothesis, SchemaError>,
    pub nat: Result<Hypothesis, SchemaError>,
    gha: Thread,
    nma: Thread,
}

pub fn open_debate(
    session: &mut Session<'_>,
    trace: &Trace,
    kb: &RetrievalResult,
    context: &str,
    config: &DebateConfig,
) -> Result<Openings, BackendError> {
    let prompt = opening_prompt(trace, kb, context);
    let mut gha = Thread::new(Agent::Gha, prompt.clone());
    let mut nma = Thread::new(Agent::Nma, prompt);
    let gen = structured(session, &mut gha, format!("open/{}/gha", trace.trace_id), config, |raw| {
        parse_hypothesis(raw, Stance::Gen)
    })?;
    let nat = structured(session, &mut nma, format!("open/{}/nma", trace.trace_id), config, |raw| {
        parse_hypothesis(raw, Stance::Nat)
    })?;
    Ok(Openings { gen, nat, gha, nma })
}

fn describe(h: &Hypothesis) -> String {
    if h.assumptions.is_empty() {
        h.statement.clone()
    } else {
        format!("{} (assumptions: {})", h.statement, h.assumptions.join("; "))
    }
}

/// Record for a trace whose debate stage is disabled: the openings become the
/// final hypotheses and the trace is left unresolved.
pub fn opening_only_record(trace: &Trace, kb: &RetrievalResult, openings: Openings) -> DebateRecord {
    DebateRecord {
        trace_id: trace.trace_id.clone(),
        turns: Vec::new(),
        outcome: DebateOutcome::Unresolved,
        hypothesis_gen: openings.gen.unwrap_or_else(|_| placeholder(Stance::Gen)),
        hypothesis_nat: openings.nat.unwrap_or_else(|_| placeholder(Stance::Nat)),
        rounds_used: 0,
        kb_context_digest: kb.context_digest(),
        template_id: templates::DEBATE_ID.to_string(),
        termination: None,
    }
}

pub fn run_debate(
    session: &mut Session<'_>,
    trace: &Trace,
    kb: &RetrievalResult,
    context: &str,
    config: &DebateConfig,
) -> Result<DebateRecord, DebateError> {
    if config.max_rounds == 0 {
        return Err(DebateError::ZeroRounds);
    }
    let Openings { gen, nat, mut gha, mut nma } = open_debate(session, trace, kb, context, config)?;
    let mut record = DebateRecord {
        trace_id: trace.trace_id.clone(),
        turns: Vec::new(),
        outcome: DebateOutcome::Unresolved,
        hypothesis_gen: gen.clone().unwrap_or_else(|_| placeholder(Stance::Gen)),
        hypothesis_nat: nat.clone().unwrap_or_else(|_| placeholder(Stance::Nat)),
        rounds_used: 0,
        kb_context_digest: kb.context_digest(),
        template_id: templates::DEBATE_ID.to_string(),
        termination: None,
    };
    let end = |record: &mut DebateRecord, loser: Agent, reason: LossReason, round: u32| {
        record.outcome = DebateOutcome::Resolved { value: loser.loss_value() };
        record.termination = Some(Termination { loser, reason, round });
        record.rounds_used = round;
    };
    if gen.is_err() {
        end(&mut record, Agent::Gha, LossReason::SchemaFailure, 0);
        return Ok(record);
    }
    if nat.is_err() {
        end(&mut record, Agent::Nma, LossReason::SchemaFailure, 0);
        return Ok(record);
    }

    for round in 1..=config.max_rounds {
        record.rounds_used = round;
        for (speaker, kind) in [
            (Agent::Gha, TurnKind::Challenge),
            (Agent::Nma, TurnKind::Response),
            (Agent::Nma, TurnKind::Challenge),
            (Agent::Gha, TurnKind::Response),
        ] {
            let prompt = turn_prompt(&record, speaker, kind, round);
            let thread = match speaker {
                Agent::Gha => &mut gha,
                Agent::Nma => &mut nma,
            };
            debug_assert_eq!(thread.agent, speaker);
            thread.messages.push(Message::user(prompt));
            let label = format!(
                "turn/{}/r{round}/{}-{}",
                trace.trace_id,
                speaker.slug(),
                match kind {
                    TurnKind::Challenge => "challenge",
                    TurnKind::Response => "response",
                }
            );
            let turn = match structured(session, thread, label, config, |raw| parse_turn(raw, speaker, round, kind))? {
                Ok(turn) => turn,
                Err(err) => {
                    tracing::warn!(trace = %trace.trace_id, agent = %speaker, round, error = %err, "turn failed validation");
                    end(&mut record, speaker, LossReason::SchemaFailure, round);
                    return Ok(record);
                }
            };
            if !turn.assumptions.is_empty() {
                let h = match speaker {
                    Agent::Gha => &mut record.hypothesis_gen,
                    Agent::Nma => &mut record.hypothesis_nat,
                };
                h.assumptions = turn.assumptions.clone();
            }
            let unanswered = kind == TurnKind::Response
                && turn.status == TurnStatus::Maintain
                && turn.rebuttal.trim().is_empty()
                && last_challenge(&record, speaker.opponent(), round).is_some_and(|c| !c.trim().is_empty());
            let status = turn.status;
            record.turns.push(turn);
            if status == TurnStatus::Concede {
                end(&mut record, speaker, LossReason::Conceded, round);
                return Ok(record);
            }
            if unanswered {
                end(&mut record, speaker, LossReason::EmptyRebuttal, round);
                return Ok(record);
            }
        }
    }
    Ok(record)
}

fn last_challenge(record: &DebateRecord, challenger: Agent, round: u32) -> Option<&str> {
    record
        .turns
        .iter()
        .rev()
        .find(|t| t.agent == challenger && t.round == round && t.kind == TurnKind::Challenge)
        .map(|t| t.challenge.as_str())
}

fn turn_prompt(record: &DebateRecord, speaker: Agent, kind: TurnKind, round: u32) -> String {
    let opposing = match speaker {
        Agent::Gha => &record.hypothesis_nat,
        Agent::Nma => &record.hypothesis_gen,
    };
    match kind {
        TurnKind::Challenge => {
            let mut s = format!("Round {round}. The opposing hypothesis is: {}\n", describe(opposing));
            if let Some(prev) = record.turns.iter().rev().find(|t| t.agent == speaker.opponent()) {
                s.push_str(&format!("Their latest argument: {}\n", prev.argument));
            }
            s.push_str(
                "Challenge it: put your strongest contradictory evidence in `challenge`, leave `rebuttal` empty, and restate your position in `argument`. Reply with the turn JSON.",
            );
            s
        }
        TurnKind::Response => {
            let (argument, challenge) = record
                .turns
                .iter()
                .rev()
                .find(|t| t.agent == speaker.opponent() && t.kind == TurnKind::Challenge)
                .map(|t| (t.argument.as_str(), t.challenge.as_str()))
                .unwrap_or(("", ""));
            format!(
                "Round {round}. {} argues: {argument}\n{} challenges your hypothesis: {challenge}\nRebut the challenge in `rebuttal` and keep `argument` as your position, or set status to concede if your hypothesis can no longer explain the trace. Reply with the turn JSON.",
                speaker.opponent(),
                speaker.opponent()
            )
        }
    }
}
