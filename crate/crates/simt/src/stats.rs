//! Per-action statistics aggregation, system ranking, and rendering of
//! action-aware inference prompts from those statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("stats line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no statistics for allowed action {0:?}")]
    MissingStats(String),
    #[error("stats list action {0:?} that is not in the allowed set")]
    UnknownStatsAction(String),
    #[error("ranking needs at least 2 systems (got {0})")]
    TooFewSystems(usize),
    #[error("duplicate system label {0:?}")]
    DuplicateSystem(String),
}

/// Aggregated quality/latency figures for one action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub action_set: String,
    pub mean_bleu: f64,
    pub mean_laal_sec: f64,
    pub n: usize,
}

/// One per-sentence measurement: which action set produced it, its BLEU and
/// its time-based lag.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsRecord {
    pub action_set: String,
    pub bleu: f64,
    pub laal_sec: f64,
}

/// Unweighted arithmetic means grouped by action set, ordered by label.
pub fn aggregate_stats(records: &[StatsRecord]) -> Result<Vec<ActionStats>, StatsError> {
    if records.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = groups.entry(&r.action_set).or_insert((0.0, 0.0, 0));
        e.0 += r.bleu;
        e.1 += r.laal_sec;
        e.2 += 1;
    }
    Ok(groups
        .into_iter()
        .map(|(label, (bleu, laal, n))| ActionStats {
            action_set: label.to_string(),
            mean_bleu: bleu / n as f64,
            mean_laal_sec: laal / n as f64,
            n,
        })
        .collect())
}

/// Parse the tab-separated per-sentence stats file:
/// `action_set \t bleu \t laal_sec`.
pub fn parse_stats_file(content: &str) -> Result<Vec<StatsRecord>, StatsError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(StatsError::Parse {
                line: i + 1,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse_num = |s: &str| -> Result<f64, StatsError> {
            s.parse().map_err(|_| StatsError::Parse {
                line: i + 1,
                msg: format!("{s:?} is not a number"),
            })
        };
        out.push(StatsRecord {
            action_set: fields[0].to_string(),
            bleu: parse_num(fields[1])?,
            laal_sec: parse_num(fields[2])?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    StepWise,
    PrefixFeeding,
    FewShot,
}

impl std::str::FromStr for PromptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step-wise" => Ok(PromptMode::StepWise),
            "prefix-feeding" => Ok(PromptMode::PrefixFeeding),
            "few-shot" => Ok(PromptMode::FewShot),
            other => Err(format!("unknown prompt mode {:?}", other)),
        }
    }
}

/// Everything needed to render one inference prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub lang_pair: String,
    pub mode: PromptMode,
    /// Action names offered to the agent, in presentation order. READ and
    /// WRITE are always available and carry no statistics.
    pub allowed_actions: Vec<String>,
    pub stats: Vec<ActionStats>,
    /// Few-shot demonstrations, embedded verbatim.
    pub demonstrations: Vec<String>,
    /// Source sentence slot; rendered as a placeholder when absent.
    pub source: Option<String>,
}

// Versioned prompt templates; experiments pin a version by file name.
const STEP_WISE_V1: &str = include_str!("../templates/step_wise_v1.txt");
const PREFIX_FEEDING_V1: &str = include_str!("../templates/prefix_feeding_v1.txt");
const FEW_SHOT_V1: &str = include_str!("../templates/few_shot_v1.txt");

fn action_description(name: &str) -> &'static str {
    match name {
        "READ" => "Wait for the next source word (default).",
        "WRITE" => "Output a target word or phrase.",
        "Drop" => {
            "Remove previously read word(s) if they are meaningless fillers (e.g., \"uh\", \"um\"), \
             repetitions, false starts, or self-corrections. Use only when clearly justified."
        }
        "Partial_Summarization" => {
            "Merge or simplify redundant or equivalent expressions, while preserving the meaning \
             and tone (e.g., politeness, speculation)."
        }
        "Cut" | "Sentence_Cut" => {
            "Intentionally split the sentence into two shorter, independently translatable units. \
             Use only when the sentence is long or syntactically complex."
        }
        "PRONOUN" | "Pronominalization" => {
            "Replace a repeated noun phrase with a pronoun ONLY IF the referent is unambiguous."
        }
        _ => "Optional action.",
    }
}

/// Format one stats line exactly as it appears in prompts: seconds to three
/// decimals, BLEU to two.
pub fn format_stats_line(s: &ActionStats) -> String {
    format!(
        "- {} → AL ≈ {:.3}s, BLEU ≈ {:.2}",
        s.action_set, s.mean_laal_sec, s.mean_bleu
    )
}

/// Render the prompt for `spec` from its versioned template. Deterministic:
/// the same spec always yields the same text, and any changed statistic
/// changes the output.
pub fn render_prompt(spec: &PromptSpec) -> Result<String, StatsError> {
    // Every optional allowed action must come with statistics, and stats may
    // not name actions outside the allowed set.
    let optional: Vec<&String> = spec
        .allowed_actions
        .iter()
        .filter(|a| a.as_str() != "READ" && a.as_str() != "WRITE")
        .collect();
    for action in &optional {
        if !spec.stats.iter().any(|s| &s.action_set == *action) {
            return Err(StatsError::MissingStats((*action).clone()));
        }
    }
    for s in &spec.stats {
        if !spec.allowed_actions.contains(&s.action_set) {
            return Err(StatsError::UnknownStatsAction(s.action_set.clone()));
        }
    }

    let actions_block = spec
        .allowed_actions
        .iter()
        .map(|a| format!("- {}: {}", a, action_description(a)))
        .collect::<Vec<_>>()
        .join("\n");
    // Stats lines follow the allowed-action order.
    let stats_block = optional
        .iter()
        .filter_map(|a| spec.stats.iter().find(|s| &&s.action_set == a))
        .map(format_stats_line)
        .collect::<Vec<_>>()
        .join("\n");
    let demos_block = spec.demonstrations.join("\n");
    let source = spec
        .source
        .clone()
        .unwrap_or_else(|| "<input sentence>".to_string());

    let template = match spec.mode {
        PromptMode::StepWise => STEP_WISE_V1,
        PromptMode::PrefixFeeding => PREFIX_FEEDING_V1,
        PromptMode::FewShot => FEW_SHOT_V1,
    };
    Ok(template
        .replace("{{LANG_PAIR}}", &spec.lang_pair)
        .replace("{{ACTIONS}}", &actions_block)
        .replace("{{STATS}}", &stats_block)
        .replace("{{DEMONSTRATIONS}}", &demos_block)
        .replace("{{SOURCE}}", &source))
}

/// Ordering of systems induced by a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Systems joined with " < ", best first.
    pub ordering: String,
    /// Set when exact ties were broken deterministically by label.
    pub tied: bool,
}

/// Sort systems by metric value (direction per `lower_is_better`) and join
/// with " < ". Exact ties break by label and set the tie flag.
pub fn rank_systems(
    scores: &[(String, f64)],
    lower_is_better: bool,
) -> Result<Ranking, StatsError> {
    if scores.len() < 2 {
        return Err(StatsError::TooFewSystems(scores.len()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (label, _) in scores {
        if !seen.insert(label) {
            return Err(StatsError::DuplicateSystem(label.clone()));
        }
    }
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        let ord = if lower_is_better { ord } else { ord.reverse() };
        ord.then_with(|| a.0.cmp(&b.0))
    });
    let tied = sorted.windows(2).any(|w| w[0].1 == w[1].1);
    Ok(Ranking {
        ordering: sorted
            .iter()
            .map(|(l, _)| l.as_str())
            .collect::<Vec<_>>()
            .join(" < "),
        tied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(a: &str, bleu: f64, laal: f64) -> StatsRecord {
        StatsRecord {
            action_set: a.to_string(),
            bleu,
            laal_sec: laal,
        }
    }

    #[test]
    fn aggregate_means_two_records() {
        let stats =
            aggregate_stats(&[record("Drop", 58.0, 0.8), record("Drop", 60.0, 0.9)]).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].action_set, "Drop");
        assert_eq!(stats[0].n, 2);
        assert!((stats[0].mean_bleu - 59.0).abs() < 1e-12);
        assert!((stats[0].mean_laal_sec - 0.85).abs() < 1e-12);
    }

    #[test]
    fn aggregate_single_record_is_itself() {
        let stats = aggregate_stats(&[record("Cut", 60.28, 0.824)]).unwrap();
        assert_eq!(stats[0].mean_bleu, 60.28);
        assert_eq!(stats[0].n, 1);
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(matches!(aggregate_stats(&[]), Err(StatsError::EmptyInput)));
    }

    #[test]
    fn stats_file_round_trip() {
        let recs = parse_stats_file("Drop\t58.94\t0.851\nCut\t60.28\t0.824\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].laal_sec, 0.824);
        assert!(parse_stats_file("Drop\tx\t1").is_err());
    }

    fn dev_spec(mode: PromptMode) -> PromptSpec {
        let mk = |a: &str, bleu: f64, laal: f64| ActionStats {
            action_set: a.into(),
            mean_bleu: bleu,
            mean_laal_sec: laal,
            n: 1,
        };
        PromptSpec {
            lang_pair: "En-Zh".into(),
            mode,
            allowed_actions: vec![
                "READ".into(),
                "WRITE".into(),
                "Drop".into(),
                "Partial_Summarization".into(),
                "Cut".into(),
                "PRONOUN".into(),
            ],
            stats: vec![
                mk("Drop", 58.94, 0.851),
                mk("Partial_Summarization", 60.33, 0.847),
                mk("Cut", 60.28, 0.824),
                mk("PRONOUN", 60.85, 0.858),
            ],
            demonstrations: vec![],
            source: None,
        }
    }

    #[test]
    fn step_wise_prompt_contains_exact_stats_lines() {
        let text = render_prompt(&dev_spec(PromptMode::StepWise)).unwrap();
        assert!(text.contains("Drop → AL ≈ 0.851s, BLEU ≈ 58.94"));
        assert!(text.contains("Partial_Summarization → AL ≈ 0.847s, BLEU ≈ 60.33"));
        assert!(text.contains("Cut → AL ≈ 0.824s, BLEU ≈ 60.28"));
        assert!(text.contains("PRONOUN → AL ≈ 0.858s, BLEU ≈ 60.85"));
        assert!(text.contains("choose the action to take at each step"));
    }

    #[test]
    fn prefix_feeding_prompt_has_word_at_a_time_contract() {
        let text = render_prompt(&dev_spec(PromptMode::PrefixFeeding)).unwrap();
        assert!(text.contains("a word at one time"));
        assert!(text.contains("output the token <VIOLATION> and stop"));
    }

    #[test]
    fn few_shot_prompt_embeds_demonstrations() {
        let mut spec = dev_spec(PromptMode::FewShot);
        spec.demonstrations = vec![
            "{\"source\": \"a\", \"translation\": \"甲\"}".into(),
            "{\"source\": \"b\", \"translation\": \"乙\"}".into(),
            "{\"source\": \"c\", \"translation\": \"丙\"}".into(),
        ];
        let text = render_prompt(&spec).unwrap();
        assert!(text.contains("Output only JSON"));
        assert!(text.contains("[System]"));
        for d in &spec.demonstrations {
            assert!(text.contains(d));
        }
    }

    #[test]
    fn missing_stats_for_allowed_action_errors() {
        let mut spec = dev_spec(PromptMode::StepWise);
        spec.stats.retain(|s| s.action_set != "Cut");
        assert!(matches!(
            render_prompt(&spec),
            Err(StatsError::MissingStats(a)) if a == "Cut"
        ));
    }

    #[test]
    fn stats_for_unknown_action_error() {
        let mut spec = dev_spec(PromptMode::StepWise);
        spec.stats.push(ActionStats {
            action_set: "Shout".into(),
            mean_bleu: 1.0,
            mean_laal_sec: 1.0,
            n: 1,
        });
        assert!(matches!(
            render_prompt(&spec),
            Err(StatsError::UnknownStatsAction(_))
        ));
    }

    #[test]
    fn render_is_injective_on_stats() {
        let spec = dev_spec(PromptMode::StepWise);
        let base = render_prompt(&spec).unwrap();
        let mut changed = spec.clone();
        changed.stats[0].mean_bleu += 0.01;
        assert_ne!(base, render_prompt(&changed).unwrap());
        assert_eq!(base, render_prompt(&spec).unwrap());
    }

    #[test]
    fn ranking_matches_expected_direction() {
        let scores = vec![
            ("Action".to_string(), 2.438),
            ("Salami".to_string(), 2.656),
            ("MUSTC".to_string(), 2.650),
        ];
        let r = rank_systems(&scores, true).unwrap();
        assert_eq!(r.ordering, "Action < MUSTC < Salami");
        assert!(!r.tied);
        let r = rank_systems(&scores, false).unwrap();
        assert_eq!(r.ordering, "Salami < MUSTC < Action");
    }

    #[test]
    fn ranking_flags_exact_ties_and_breaks_by_label() {
        let scores = vec![("B".to_string(), 1.0), ("A".to_string(), 1.0)];
        let r = rank_systems(&scores, true).unwrap();
        assert!(r.tied);
        assert_eq!(r.ordering, "A < B");
    }

    #[test]
    fn ranking_rejects_small_or_duplicate_inputs() {
        assert!(rank_systems(&[("A".into(), 1.0)], true).is_err());
        let dup = vec![("A".to_string(), 1.0), ("A".to_string(), 2.0)];
        assert!(matches!(
            rank_systems(&dup, true),
            Err(StatsError::DuplicateSystem(_))
        ));
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            mut records in prop::collection::vec(
                ("[A-C]", 0.0f64..100.0, 0.0f64..5.0)
                    .prop_map(|(a, b, l)| record(&a, b, l)),
                1..20
            ),
            k in 0usize..20,
        ) {
            let base = aggregate_stats(&records).unwrap();
            let n = records.len();
            records.rotate_left(k % n);
            let rotated = aggregate_stats(&records).unwrap();
            prop_assert_eq!(base.len(), rotated.len());
            for (a, b) in base.iter().zip(&rotated) {
                prop_assert_eq!(&a.action_set, &b.action_set);
                prop_assert!((a.mean_bleu - b.mean_bleu).abs() < 1e-9);
                prop_assert!((a.mean_laal_sec - b.mean_laal_sec).abs() < 1e-9);
            }
        }

        #[test]
        fn ranking_contains_each_system_exactly_once(
            values in prop::collection::vec(0.0f64..10.0, 2..6),
        ) {
            let scores: Vec<(String, f64)> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| (format!("S{i}"), v))
                .collect();
            let r = rank_systems(&scores, true).unwrap();
            let parts: Vec<&str> = r.ordering.split(" < ").collect();
            prop_assert_eq!(parts.len(), scores.len());
            for (label, _) in &scores {
                prop_assert_eq!(parts.iter().filter(|p| *p == label).count(), 1);
            }
        }
    }
}
