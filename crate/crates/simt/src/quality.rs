//! Reference-based quality metrics: corpus BLEU, chrF, TER and
//! alignment-based Spearman correlation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{SentenceAlignment, TokenScheme};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("hypothesis count {hyps} does not match reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("TER reference must be non-empty")]
    EmptyReference,
    #[error("Spearman correlation undefined for fewer than 2 links (got {0})")]
    UndefinedCorrelation(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// BLEU smoothing for n-gram orders with zero clipped matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method", content = "value")]
pub enum Smoothing {
    None,
    /// Replace zero numerators with a fixed epsilon.
    Floor(f64),
    /// Exponential: each zero-match order n gets 1 / (2^k * total_n), k
    /// counting zero orders so far.
    Exp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub smoothing: Smoothing,
    pub tokenization: TokenScheme,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_order: 4,
            smoothing: Smoothing::Exp,
            tokenization: TokenScheme::default(),
        }
    }
}

impl BleuConfig {
    fn validate(&self) -> Result<(), MetricError> {
        if self.max_order < 1 {
            return Err(MetricError::InvalidConfig("max_order must be >= 1".into()));
        }
        if let Smoothing::Floor(eps) = self.smoothing {
            if eps <= 0.0 {
                return Err(MetricError::InvalidConfig("floor epsilon must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Stable textual fingerprint embedded in reports for reproducibility.
    pub fn fingerprint(&self) -> String {
        let smoothing = match self.smoothing {
            Smoothing::None => "none".to_string(),
            Smoothing::Floor(e) => format!("floor({})", e),
            Smoothing::Exp => "exp".to_string(),
        };
        format!(
            "bleu|order={}|smoothing={}|tok={:?}",
            self.max_order, smoothing, self.tokenization
        )
    }
}

/// Per-sentence scores plus the corpus score, with the config fingerprint so
/// numbers can be reproduced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub config_fingerprint: String,
    pub per_sentence: Vec<f64>,
    pub corpus: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU on pooled n-gram counts, uniform weights, brevity penalty
/// `min(1, exp(1 - ref_len/hyp_len))`. Returns a value in [0, 100].
pub fn corpus_bleu(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    cfg: &BleuConfig,
) -> Result<f64, MetricError> {
    cfg.validate()?;
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let mut matches = vec![0usize; cfg.max_order];
    let mut totals = vec![0usize; cfg.max_order];
    for (hyp, rf) in hyps.iter().zip(refs) {
        for n in 1..=cfg.max_order {
            let h = ngram_counts(hyp, n);
            if h.is_empty() {
                continue;
            }
            let r = ngram_counts(rf, n);
            totals[n - 1] += hyp.len() + 1 - n;
            for (gram, &count) in &h {
                matches[n - 1] += count.min(r.get(gram).copied().unwrap_or(0));
            }
        }
    }

    // Effective order: drop orders with no hypothesis n-grams at all.
    let eff_order = totals.iter().filter(|&&t| t > 0).count();
    if eff_order == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    let mut exp_factor = 1.0f64;
    for n in 0..eff_order {
        let total = totals[n] as f64;
        let p = if matches[n] > 0 {
            matches[n] as f64 / total
        } else {
            match cfg.smoothing {
                Smoothing::None => return Ok(0.0),
                Smoothing::Floor(eps) => eps / total,
                Smoothing::Exp => {
                    exp_factor *= 2.0;
                    1.0 / (exp_factor * total)
                }
            }
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / eff_order as f64).exp())
}

fn char_ngram_stats(hyp: &[char], rf: &[char], n: usize) -> (usize, usize, usize) {
    fn count<'a>(s: &'a [char], n: usize) -> HashMap<&'a [char], usize> {
        let mut m: HashMap<&[char], usize> = HashMap::new();
        if s.len() >= n {
            for w in s.windows(n) {
                *m.entry(w).or_insert(0) += 1;
            }
        }
        m
    }
    let h = count(hyp, n);
    let r = count(rf, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let h_total = hyp.len().saturating_sub(n - 1);
    let r_total = rf.len().saturating_sub(n - 1);
    (matched, h_total, r_total)
}

/// chrF: F_beta over character n-gram precision/recall averaged over orders
/// 1..=char_order, whitespace excluded. Counts are pooled corpus-wide; orders
/// with no n-grams on either side are skipped. Returns a value in [0, 100].
pub fn chrf(
    hyps: &[String],
    refs: &[String],
    char_order: usize,
    beta: f64,
) -> Result<f64, MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let strip = |s: &str| -> Vec<char> { s.chars().filter(|c| !c.is_whitespace()).collect() };
    let hyp_chars: Vec<Vec<char>> = hyps.iter().map(|s| strip(s)).collect();
    let ref_chars: Vec<Vec<char>> = refs.iter().map(|s| strip(s)).collect();

    let mut prec_sum = 0.0;
    let mut rec_sum = 0.0;
    let mut counted_orders = 0usize;
    for n in 1..=char_order {
        let (mut matched, mut h_total, mut r_total) = (0usize, 0usize, 0usize);
        for (h, r) in hyp_chars.iter().zip(&ref_chars) {
            let (m, ht, rt) = char_ngram_stats(h, r, n);
            matched += m;
            h_total += ht;
            r_total += rt;
        }
        if h_total == 0 && r_total == 0 {
            continue;
        }
        counted_orders += 1;
        if h_total > 0 {
            prec_sum += matched as f64 / h_total as f64;
        }
        if r_total > 0 {
            rec_sum += matched as f64 / r_total as f64;
        }
    }
    if counted_orders == 0 {
        return Ok(0.0);
    }
    let p = prec_sum / counted_orders as f64;
    let r = rec_sum / counted_orders as f64;
    let denom = beta * beta * p + r;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + beta * beta) * p * r / denom)
}

/// Word-level Levenshtein distance (unit-cost insert/delete/substitute).
pub fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Shift search limits taken from the reference TER implementation.
const MAX_SHIFT_SPAN: usize = 10;
const MAX_SHIFT_DIST: usize = 10;

fn apply_shift(seq: &[String], start: usize, len: usize, dest: usize) -> Vec<String> {
    let mut rest: Vec<String> = Vec::with_capacity(seq.len());
    rest.extend_from_slice(&seq[..start]);
    rest.extend_from_slice(&seq[start + len..]);
    let mut out = Vec::with_capacity(seq.len());
    out.extend_from_slice(&rest[..dest]);
    out.extend_from_slice(&seq[start..start + len]);
    out.extend_from_slice(&rest[dest..]);
    out
}

/// Cap on the number of states the shift search may expand. The first
/// depth-first path is exactly the plain greedy loop, so exhausting the
/// budget degrades gracefully to the greedy answer.
const MAX_SHIFT_EXPANSIONS: usize = 10_000;

/// Collect every block shift that achieves the best (largest) edit-distance
/// reduction, ordered longest span first, then smaller (start, dest).
fn max_reduction_shifts(hyp: &[String], rf: &[String], base: usize) -> Vec<(Vec<String>, usize)> {
    let mut best_d = base;
    let mut cands: Vec<((std::cmp::Reverse<usize>, usize, usize), Vec<String>, usize)> =
        Vec::new();
    for start in 0..hyp.len() {
        for len in 1..=MAX_SHIFT_SPAN.min(hyp.len() - start) {
            let remaining = hyp.len() - len;
            for dest in 0..=remaining {
                if dest == start || start.abs_diff(dest) > MAX_SHIFT_DIST {
                    continue;
                }
                let shifted = apply_shift(hyp, start, len, dest);
                let d = edit_distance(&shifted, rf);
                if d < best_d {
                    best_d = d;
                    cands.clear();
                }
                if d == best_d && d < base {
                    cands.push(((std::cmp::Reverse(len), start, dest), shifted, d));
                }
            }
        }
    }
    cands.sort_by(|a, b| a.0.cmp(&b.0));
    cands.into_iter().map(|(_, seq, d)| (seq, d)).collect()
}

/// Greedy shift loop with tie exploration: each step applies a shift with
/// the maximal edit-distance reduction, but when several shifts tie, every
/// tied candidate is explored (depth-first, within a fixed expansion budget)
/// and the cheapest completion wins. Returns the best shifts + edits total.
fn shift_search(
    state: &[String],
    rf: &[String],
    dist: usize,
    shifts: usize,
    best: &mut usize,
    budget: &mut usize,
) {
    if shifts + dist < *best {
        *best = shifts + dist;
    }
    if dist == 0 || shifts + 1 >= *best || *budget == 0 {
        return;
    }
    *budget -= 1;
    for (shifted, d) in max_reduction_shifts(state, rf, dist) {
        shift_search(&shifted, rf, d, shifts + 1, best, budget);
    }
}

/// TER as a percentage: (shifts + edits) / |ref| * 100, shifts found by the
/// greedy loop that repeatedly applies the block shift reducing edit distance
/// the most (ties explored exhaustively within a bounded budget).
pub fn ter(hyp: &[String], rf: &[String]) -> Result<f64, MetricError> {
    if rf.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let dist = edit_distance(hyp, rf);
    let mut best = dist;
    let mut budget = MAX_SHIFT_EXPANSIONS;
    shift_search(hyp, rf, dist, 0, &mut best, &mut budget);
    Ok(best as f64 / rf.len() as f64 * 100.0)
}

/// Plain edit-distance TER (shifts disabled); used for oracle equivalence.
pub fn ter_no_shift(hyp: &[String], rf: &[String]) -> Result<f64, MetricError> {
    if rf.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(edit_distance(hyp, rf) as f64 / rf.len() as f64 * 100.0)
}

fn average_ranks(values: &[usize]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| values[i]);
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average rank for the tie group [i, j], 1-based ranks.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between the source and target indices of the
/// alignment links, with average ranks for ties. Links are sorted canonically
/// (target, then source) before ranking.
pub fn spearman_alignment(align: &SentenceAlignment) -> Result<f64, MetricError> {
    let mut links: Vec<(usize, usize)> = align.links().collect();
    if links.len() < 2 {
        return Err(MetricError::UndefinedCorrelation(links.len()));
    }
    links.sort_by_key(|&(s, t)| (t, s));
    let src: Vec<usize> = links.iter().map(|&(s, _)| s).collect();
    let tgt: Vec<usize> = links.iter().map(|&(_, t)| t).collect();
    let rx = average_ranks(&src);
    let ry = average_ranks(&tgt);
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        vx += (a - mean) * (a - mean);
        vy += (b - mean) * (b - mean);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let corpus = vec![toks("the cat sat"), toks("on the mat")];
        let score = corpus_bleu(&corpus, &corpus, &BleuConfig::default()).unwrap();
        assert!((score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_worked_example_matches_hand_counts() {
        // hyp "the cat sat down" vs ref "the cat sat on the mat":
        // clipped precisions 3/4, 2/3, 1/2, 0/1; BP = exp(1 - 6/4).
        let hyp = vec![toks("the cat sat down")];
        let rf = vec![toks("the cat sat on the mat")];
        let bp = (1.0f64 - 6.0 / 4.0).exp();

        // exp smoothing: zero 4-gram order becomes 1/(2*1).
        let expected_exp =
            100.0 * bp * ((0.75f64.ln() + (2.0 / 3.0f64).ln() + 0.5f64.ln() + 0.5f64.ln()) / 4.0).exp();
        let got = corpus_bleu(&hyp, &rf, &BleuConfig::default()).unwrap();
        assert!((got - expected_exp).abs() < 1e-9, "{got} vs {expected_exp}");

        // floor smoothing.
        let eps = 0.1;
        let expected_floor = 100.0
            * bp
            * ((0.75f64.ln() + (2.0 / 3.0f64).ln() + 0.5f64.ln() + (eps / 1.0f64).ln()) / 4.0).exp();
        let cfg = BleuConfig {
            smoothing: Smoothing::Floor(eps),
            ..BleuConfig::default()
        };
        assert!((corpus_bleu(&hyp, &rf, &cfg).unwrap() - expected_floor).abs() < 1e-9);

        // no smoothing: zero precision zeroes the score.
        let cfg = BleuConfig {
            smoothing: Smoothing::None,
            ..BleuConfig::default()
        };
        assert_eq!(corpus_bleu(&hyp, &rf, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn bleu_empty_hypothesis_scores_zero() {
        let score = corpus_bleu(&[vec![]], &[toks("a b")], &BleuConfig::default()).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn bleu_rejects_length_mismatch() {
        assert!(matches!(
            corpus_bleu(&[toks("a")], &[], &BleuConfig::default()),
            Err(MetricError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn chrf_identity_is_100() {
        let c = vec!["abcd".to_string()];
        assert!((chrf(&c, &c, 6, 2.0).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn chrf_worked_example_matches_hand_counts() {
        // hyp "abcd" vs ref "abce": shared n-grams {a,b,c}, {ab,bc}, {abc}.
        // Orders 5..6 are skipped (no n-grams on either side).
        let p = (3.0 / 4.0 + 2.0 / 3.0 + 1.0 / 2.0 + 0.0) / 4.0;
        let r = p; // symmetric lengths
        let beta2 = 4.0;
        let expected = 100.0 * (1.0 + beta2) * p * r / (beta2 * p + r);
        let got = chrf(&["abcd".into()], &["abce".into()], 6, 2.0).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn chrf_disjoint_strings_score_zero() {
        assert_eq!(chrf(&["abc".into()], &["xyz".into()], 6, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn ter_identity_is_zero() {
        assert_eq!(ter(&toks("a b c"), &toks("a b c")).unwrap(), 0.0);
    }

    #[test]
    fn ter_substitution_and_shift_each_cost_one_edit() {
        assert_eq!(ter(&toks("a x c d"), &toks("a b c d")).unwrap(), 25.0);
        assert_eq!(ter(&toks("b a c d"), &toks("a b c d")).unwrap(), 25.0);
    }

    #[test]
    fn ter_empty_reference_errors() {
        assert!(matches!(ter(&toks("a"), &[]), Err(MetricError::EmptyReference)));
    }

    #[test]
    fn spearman_identity_and_reversal_are_exact() {
        let id = SentenceAlignment::from_links([(1, 1), (2, 2), (3, 3)]);
        assert_eq!(spearman_alignment(&id).unwrap(), 1.0);
        let rev = SentenceAlignment::from_links([(1, 3), (2, 2), (3, 1)]);
        assert_eq!(spearman_alignment(&rev).unwrap(), -1.0);
    }

    #[test]
    fn spearman_four_point_example_matches_rank_formula() {
        // {(1,1),(2,3),(3,2),(4,4)}: sorted by target -> src [1,3,2,4],
        // no ties, rho = 1 - 6*sum(d^2)/(n(n^2-1)) = 1 - 6*2/60 = 0.8.
        let a = SentenceAlignment::from_links([(1, 1), (2, 3), (3, 2), (4, 4)]);
        assert!((spearman_alignment(&a).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_needs_two_links() {
        let a = SentenceAlignment::from_links([(1, 1)]);
        assert!(matches!(
            spearman_alignment(&a),
            Err(MetricError::UndefinedCorrelation(1))
        ));
    }

    proptest! {
        #[test]
        fn bleu_is_permutation_invariant(
            pairs in prop::collection::vec(("[abc]{1,5}", "[abc]{1,5}"), 1..6),
            seed in 0u64..1000,
        ) {
            let hyps: Vec<Vec<String>> = pairs.iter().map(|(h, _)| h.chars().map(String::from).collect()).collect();
            let refs: Vec<Vec<String>> = pairs.iter().map(|(_, r)| r.chars().map(String::from).collect()).collect();
            let cfg = BleuConfig::default();
            let base = corpus_bleu(&hyps, &refs, &cfg).unwrap();
            // Deterministic rotation as the permutation.
            let k = (seed as usize) % hyps.len();
            let rot = |v: &[Vec<String>]| -> Vec<Vec<String>> {
                v[k..].iter().chain(v[..k].iter()).cloned().collect()
            };
            let rotated = corpus_bleu(&rot(&hyps), &rot(&refs), &cfg).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9);
        }

        #[test]
        fn scores_stay_in_range(
            h in "[abcd ]{0,12}",
            r in "[abcd ]{1,12}",
        ) {
            let ht = toks(&h);
            let rt = toks(&r);
            if !rt.is_empty() {
                let b = corpus_bleu(&[ht.clone()], &[rt.clone()], &BleuConfig::default()).unwrap();
                prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
                let c = chrf(&[h.clone()], &[r.clone()], 6, 2.0).unwrap();
                prop_assert!((0.0..=100.0 + 1e-9).contains(&c));
                prop_assert!(ter(&ht, &rt).unwrap() >= 0.0);
            }
        }

        #[test]
        fn spearman_is_symmetric_under_role_swap(
            links in prop::collection::btree_set((1usize..8, 1usize..8), 2..10),
        ) {
            let a = SentenceAlignment::from_links(links.clone());
            let b = a.transposed();
            let ra = spearman_alignment(&a).unwrap();
            let rb = spearman_alignment(&b).unwrap();
            prop_assert!((ra - rb).abs() < 1e-9, "{ra} vs {rb}");
        }
    }

    // Oracle equivalence: TER with shifts disabled equals plain edit distance
    // on all pairs of length <= 4 over a 3-symbol alphabet.
    #[test]
    fn ter_no_shift_equals_edit_distance_exhaustively() {
        let strings = all_strings(3, 4);
        for rf in &strings {
            if rf.is_empty() {
                continue;
            }
            for hyp in &strings {
                let expected = edit_distance(hyp, rf) as f64 / rf.len() as f64 * 100.0;
                assert_eq!(ter_no_shift(hyp, rf).unwrap(), expected);
            }
        }
    }

    fn all_strings(alphabet: usize, max_len: usize) -> Vec<Vec<String>> {
        let symbols: Vec<String> = (0..alphabet).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let mut out: Vec<Vec<String>> = vec![vec![]];
        let mut level: Vec<Vec<String>> = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &level {
                for sym in &symbols {
                    let mut t = s.clone();
                    t.push(sym.clone());
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            level = next;
        }
        out
    }
}
