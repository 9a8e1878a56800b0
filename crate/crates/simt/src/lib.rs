//! Simulation and evaluation harness for simultaneous translation.
//!
//! The crate covers the full loop of an incremental translation experiment:
//! parsing timed transcripts and word alignments ([`corpus`]), driving an
//! incremental decision state machine with an extended action space ([`sim`]),
//! scoring outputs with BLEU/chrF/TER and alignment-based Spearman
//! ([`quality`]), computing token-level and time-based lagging ([`latency`]),
//! scheduling causal speech timetables ([`schedule`]), aggregating per-action
//! statistics into inference prompts ([`stats`]), and talking to external
//! decision agents over a line-delimited protocol ([`agent`]).

pub mod agent;
pub mod cli;
pub mod corpus;
pub mod latency;
pub mod quality;
pub mod schedule;
pub mod sim;
pub mod stats;
