//! Metric suite over per-turn prediction records.
//!
//! The unit of evaluation is a [`TurnRecord`]: one dialogue turn with the
//! predicted and gold semantic frame (intent, dialogue-act set, IOB tag
//! sequence). Records are self-contained — every metric here, and the paired
//! [`mcnemar`] comparison, can be computed from dumped records alone without
//! any model code.
//!
//! Metrics: intent accuracy, dialogue-act F1 (micro by default, macro behind
//! a flag), slot chunk F1 in the CoNLL exact-boundary/exact-type convention,
//! and frame accuracy (intent, act set, and full tag sequence all correct).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path} line {line}: {source}")]
    Jsonl { path: String, line: usize, source: serde_json::Error },
    #[error("malformed IOB tag {0:?}")]
    MalformedTag(String),
    #[error("record {dialogue} turn {turn}: {detail}")]
    MalformedRecord { dialogue: String, turn: usize, detail: String },
    #[error("prediction dumps do not align: {0}")]
    Misaligned(String),
}

// ─── Per-turn records ────────────────────────────────────────────────────────

/// One evaluated turn. Tags are IOB strings (`O`, `B-slot`, `I-slot`) so the
/// dump is readable and independent of any vocabulary indexing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue_id: String,
    pub domain: String,
    pub turn_index: usize,
    pub predicted_intent: String,
    pub predicted_acts: BTreeSet<String>,
    pub predicted_tags: Vec<String>,
    pub gold_intent: String,
    pub gold_acts: BTreeSet<String>,
    pub gold_tags: Vec<String>,
}

impl TurnRecord {
    pub fn intent_correct(&self) -> bool {
        self.predicted_intent == self.gold_intent
    }

    pub fn acts_exact(&self) -> bool {
        self.predicted_acts == self.gold_acts
    }

    pub fn tags_exact(&self) -> bool {
        self.predicted_tags == self.gold_tags
    }

    /// A frame is correct iff intent, act set, and the full tag sequence all
    /// match the gold annotation.
    pub fn frame_correct(&self) -> bool {
        self.intent_correct() && self.acts_exact() && self.tags_exact()
    }

    fn validate(&self) -> Result<(), EvalError> {
        if self.predicted_tags.len() != self.gold_tags.len() {
            return Err(EvalError::MalformedRecord {
                dialogue: self.dialogue_id.clone(),
                turn: self.turn_index,
                detail: format!(
                    "{} predicted tags vs {} gold tags",
                    self.predicted_tags.len(),
                    self.gold_tags.len()
                ),
            });
        }
        Ok(())
    }
}

/// Writes records as JSON Lines: one record per line, stable field order.
pub fn write_records(path: &Path, records: &[TurnRecord]) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

pub fn read_records(path: &Path) -> Result<Vec<TurnRecord>, EvalError> {
    let text = fs::read_to_string(path)
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| EvalError::Jsonl {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

// ─── Chunk extraction ────────────────────────────────────────────────────────

/// Extracts `(type, start, exclusive_end)` chunks from IOB tag strings using
/// the CoNLL convention: maximal B-I runs of one type; an I tag that does not
/// continue a chunk of its own type opens a new chunk.
pub fn chunks(tags: &[String]) -> Result<Vec<(String, usize, usize)>, EvalError> {
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    let mut open: Option<(String, usize)> = None; // (type, start)
    for (pos, tag) in tags.iter().enumerate() {
        let kind: Option<(&str, bool)> = if tag == "O" {
            None
        } else if let Some(slot) = tag.strip_prefix("B-") {
            Some((slot, true))
        } else if let Some(slot) = tag.strip_prefix("I-") {
            Some((slot, false))
        } else {
            return Err(EvalError::MalformedTag(tag.clone()));
        };
        if let Some((slot, _)) = kind {
            if slot.is_empty() {
                return Err(EvalError::MalformedTag(tag.clone()));
            }
        }
        match kind {
            None => {
                if let Some((slot, start)) = open.take() {
                    out.push((slot, start, pos));
                }
            }
            Some((slot, is_begin)) => {
                let continues =
                    !is_begin && matches!(&open, Some((s, _)) if s.as_str() == slot);
                if !continues {
                    if let Some((s, start)) = open.take() {
                        out.push((s, start, pos));
                    }
                    open = Some((slot.to_string(), pos));
                }
            }
        }
    }
    if let Some((slot, start)) = open {
        out.push((slot, start, tags.len()));
    }
    Ok(out)
}

// ─── Metrics ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActAveraging {
    /// Pool (turn, act-label) pairs globally, then one P/R/F1.
    #[default]
    Micro,
    /// F1 per act label over the union of gold and predicted labels, averaged.
    Macro,
}

/// Raw tallies behind the ratios, kept for the JSON report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub turns: usize,
    pub intent_correct: usize,
    pub act_tp: usize,
    pub act_fp: usize,
    pub act_fn: usize,
    pub act_sets_exact: usize,
    pub chunks_gold: usize,
    pub chunks_pred: usize,
    pub chunks_correct: usize,
    pub tag_seqs_exact: usize,
    pub frames_correct: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub counts: Counts,
    pub intent_accuracy: f64,
    pub act_precision: f64,
    pub act_recall: f64,
    pub act_f1: f64,
    pub chunk_precision: f64,
    pub chunk_recall: f64,
    pub slot_chunk_f1: f64,
    pub frame_accuracy: f64,
    pub act_exact_rate: f64,
    pub tag_exact_rate: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset intersection size for act sets (sets here, so plain intersection).
fn act_tallies(records: &[TurnRecord]) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for r in records {
        tp += r.predicted_acts.intersection(&r.gold_acts).count();
        fp += r.predicted_acts.difference(&r.gold_acts).count();
        fn_ += r.gold_acts.difference(&r.predicted_acts).count();
    }
    (tp, fp, fn_)
}

fn macro_act_f1(records: &[TurnRecord]) -> f64 {
    let mut labels: BTreeSet<&String> = BTreeSet::new();
    for r in records {
        labels.extend(r.predicted_acts.iter());
        labels.extend(r.gold_acts.iter());
    }
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for label in &labels {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for r in records {
            match (r.predicted_acts.contains(*label), r.gold_acts.contains(*label)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += f1(ratio(tp, tp + fp), ratio(tp, tp + fn_));
    }
    total / labels.len() as f64
}

pub fn compute_metrics(
    records: &[TurnRecord],
    averaging: ActAveraging,
) -> Result<Metrics, EvalError> {
    let mut counts = Counts { turns: records.len(), ..Counts::default() };
    for r in records {
        r.validate()?;
        counts.intent_correct += usize::from(r.intent_correct());
        counts.act_sets_exact += usize::from(r.acts_exact());
        counts.tag_seqs_exact += usize::from(r.tags_exact());
        counts.frames_correct += usize::from(r.frame_correct());
        let gold = chunks(&r.gold_tags)?;
        let pred = chunks(&r.predicted_tags)?;
        let gold_set: BTreeSet<&(String, usize, usize)> = gold.iter().collect();
        counts.chunks_gold += gold.len();
        counts.chunks_pred += pred.len();
        counts.chunks_correct += pred.iter().filter(|c| gold_set.contains(c)).count();
    }
    let (tp, fp, fn_) = act_tallies(records);
    counts.act_tp = tp;
    counts.act_fp = fp;
    counts.act_fn = fn_;

    let act_precision = ratio(tp, tp + fp);
    let act_recall = ratio(tp, tp + fn_);
    let act_f1 = match averaging {
        ActAveraging::Micro => f1(act_precision, act_recall),
        ActAveraging::Macro => macro_act_f1(records),
    };
    let chunk_precision = ratio(counts.chunks_correct, counts.chunks_pred);
    let chunk_recall = ratio(counts.chunks_correct, counts.chunks_gold);
    let m = Metrics {
        counts,
        intent_accuracy: ratio(counts.intent_correct, counts.turns),
        act_precision,
        act_recall,
        act_f1,
        chunk_precision,
        chunk_recall,
        slot_chunk_f1: f1(chunk_precision, chunk_recall),
        frame_accuracy: ratio(counts.frames_correct, counts.turns),
        act_exact_rate: ratio(counts.act_sets_exact, counts.turns),
        tag_exact_rate: ratio(counts.tag_seqs_exact, counts.turns),
    };
    // Structural invariant: a correct frame implies each component correct.
    assert!(
        m.frame_accuracy
            <= m.intent_accuracy.min(m.act_exact_rate).min(m.tag_exact_rate) + 1e-12,
        "frame accuracy exceeds a component accuracy"
    );
    Ok(m)
}

/// Convenience wrappers mirroring the individual metric definitions.
pub fn intent_accuracy(records: &[TurnRecord]) -> f64 {
    ratio(records.iter().filter(|r| r.intent_correct()).count(), records.len())
}

pub fn act_f1(records: &[TurnRecord], averaging: ActAveraging) -> f64 {
    match averaging {
        ActAveraging::Micro => {
            let (tp, fp, fn_) = act_tallies(records);
            f1(ratio(tp, tp + fp), ratio(tp, tp + fn_))
        }
        ActAveraging::Macro => macro_act_f1(records),
    }
}

pub fn chunk_f1(records: &[TurnRecord]) -> Result<f64, EvalError> {
    Ok(compute_metrics(records, ActAveraging::Micro)?.slot_chunk_f1)
}

pub fn frame_accuracy(records: &[TurnRecord]) -> f64 {
    ratio(records.iter().filter(|r| r.frame_correct()).count(), records.len())
}

// ─── Report ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub averaging: ActAveraging,
    pub overall: Metrics,
    pub per_domain: BTreeMap<String, Metrics>,
}

pub fn report(records: &[TurnRecord], averaging: ActAveraging) -> Result<MetricsReport, EvalError> {
    let mut by_domain: BTreeMap<String, Vec<TurnRecord>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain.clone()).or_default().push(r.clone());
    }
    let mut per_domain = BTreeMap::new();
    for (domain, rs) in by_domain {
        per_domain.insert(domain, compute_metrics(&rs, averaging)?);
    }
    Ok(MetricsReport { averaging, overall: compute_metrics(records, averaging)?, per_domain })
}

impl MetricsReport {
    /// Human-readable table: Intent Acc, Act F1, Slot F1, Frame Acc per
    /// domain plus an overall row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>11} {:>8} {:>9} {:>10}",
            "domain", "turns", "intent_acc", "act_f1", "slot_f1", "frame_acc"
        );
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>11.4} {:>8.4} {:>9.4} {:>10.4}",
                name, m.counts.turns, m.intent_accuracy, m.act_f1, m.slot_chunk_f1, m.frame_accuracy
            );
        };
        for (domain, m) in &self.per_domain {
            row(domain, m);
        }
        row("overall", &self.overall);
        out
    }
}

// ─── McNemar's paired test ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarOutcome {
    /// Turns the first model got right and the second got wrong.
    pub b: usize,
    /// Turns the second model got right and the first got wrong.
    pub c: usize,
    /// Continuity-corrected chi-square statistic; absent in the exact regime.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub significant: bool,
    /// True when the exact binomial form was used (b + c < 25).
    pub exact: bool,
}

/// Continuity-corrected McNemar statistic `(|b - c| - 1)^2 / (b + c)`.
pub fn continuity_corrected_chi_square(b: usize, c: usize) -> f64 {
    let n = (b + c) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    d * d / n
}

/// Two-sided p-value for a chi-square statistic with one degree of freedom,
/// via the complementary error function.
fn chi_square_p(statistic: f64) -> f64 {
    libm::erfc((statistic / 2.0).sqrt())
}

/// Exact binomial two-sided p-value: `min(1, 2 * P(X <= min(b,c)))` for
/// `X ~ Binomial(b + c, 1/2)`.
fn exact_binomial_p(b: usize, c: usize) -> f64 {
    let n = b + c;
    let m = b.min(c);
    let mut cdf = 0.0f64;
    let mut coeff = 1.0f64; // C(n, 0)
    for k in 0..=m {
        if k > 0 {
            coeff = coeff * (n - k + 1) as f64 / k as f64;
        }
        cdf += coeff;
    }
    (2.0 * cdf / (n as f64).exp2()).min(1.0)
}

/// McNemar's test over paired per-turn outcomes `(model1 correct, model2
/// correct)`. Uses the exact binomial form when the discordant count is
/// below 25, and the continuity-corrected chi-square otherwise.
pub fn mcnemar(paired: &[(bool, bool)]) -> McNemarOutcome {
    let b = paired.iter().filter(|&&(a, b)| a && !b).count();
    let c = paired.iter().filter(|&&(a, b)| !a && b).count();
    mcnemar_from_counts(b, c)
}

pub fn mcnemar_from_counts(b: usize, c: usize) -> McNemarOutcome {
    let n = b + c;
    if n == 0 {
        return McNemarOutcome {
            b,
            c,
            statistic: None,
            p_value: 1.0,
            significant: false,
            exact: true,
        };
    }
    if n < 25 {
        let p = exact_binomial_p(b, c);
        McNemarOutcome { b, c, statistic: None, p_value: p, significant: p < 0.05, exact: true }
    } else {
        let statistic = continuity_corrected_chi_square(b, c);
        let p = chi_square_p(statistic);
        McNemarOutcome {
            b,
            c,
            statistic: Some(statistic),
            p_value: p,
            significant: p < 0.05,
            exact: false,
        }
    }
}

/// Pairs two record dumps by position, requiring identical turn identity and
/// gold annotations, and compares frame correctness.
pub fn mcnemar_records(a: &[TurnRecord], b: &[TurnRecord]) -> Result<McNemarOutcome, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Misaligned(format!(
            "{} vs {} records",
            a.len(),
            b.len()
        )));
    }
    let mut paired = Vec::with_capacity(a.len());
    for (ra, rb) in a.iter().zip(b) {
        if ra.dialogue_id != rb.dialogue_id || ra.turn_index != rb.turn_index {
            return Err(EvalError::Misaligned(format!(
                "{}#{} vs {}#{}",
                ra.dialogue_id, ra.turn_index, rb.dialogue_id, rb.turn_index
            )));
        }
        if ra.gold_intent != rb.gold_intent
            || ra.gold_acts != rb.gold_acts
            || ra.gold_tags != rb.gold_tags
        {
            return Err(EvalError::Misaligned(format!(
                "gold annotations differ at {}#{}",
                ra.dialogue_id, ra.turn_index
            )));
        }
        paired.push((ra.frame_correct(), rb.frame_correct()));
    }
    Ok(mcnemar(&paired))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{iob_to_spans, tag_name, VocabMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tags(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|s| s.to_string()).collect()
    }

    fn acts(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn record(
        id: &str,
        turn: usize,
        pred: (&str, &[&str], &[&str]),
        gold: (&str, &[&str], &[&str]),
    ) -> TurnRecord {
        TurnRecord {
            dialogue_id: id.to_string(),
            domain: "sim-r".to_string(),
            turn_index: turn,
            predicted_intent: pred.0.to_string(),
            predicted_acts: acts(pred.1),
            predicted_tags: tags(pred.2),
            gold_intent: gold.0.to_string(),
            gold_acts: acts(gold.1),
            gold_tags: tags(gold.2),
        }
    }

    // ── chunk extraction ──

    #[test]
    fn identical_tag_sequences_score_one() {
        let t = ["O", "O", "B-#", "O", "B-rest", "I-rest"];
        let r = record("d", 0, ("i", &["a"], &t), ("i", &["a"], &t));
        assert_eq!(chunk_f1(&[r]).unwrap(), 1.0);
    }

    #[test]
    fn truncated_chunk_scores_half() {
        // pred chunks {(#,2,3), (rest,4,5)}; gold {(#,2,3), (rest,4,6)};
        // correct {(#,2,3)} → P = R = 0.5.
        let gold = ["O", "O", "B-#", "O", "B-rest", "I-rest"];
        let pred = ["O", "O", "B-#", "O", "B-rest", "O"];
        let r = record("d", 0, ("i", &[], &pred), ("i", &[], &gold));
        let m = compute_metrics(&[r], ActAveraging::Micro).unwrap();
        assert_eq!(m.chunk_precision, 0.5);
        assert_eq!(m.chunk_recall, 0.5);
        assert_eq!(m.slot_chunk_f1, 0.5);
    }

    #[test]
    fn orphan_i_tag_opens_a_new_chunk() {
        // I without a preceding B of the same type starts a chunk; an I of a
        // different type closes the open chunk and starts another.
        let got = chunks(&tags(&["I-a", "I-a", "I-b", "O", "B-a", "I-b"])).unwrap();
        assert_eq!(
            got,
            vec![
                ("a".to_string(), 0, 2),
                ("b".to_string(), 2, 3),
                ("a".to_string(), 4, 5),
                ("b".to_string(), 5, 6),
            ]
        );
    }

    #[test]
    fn malformed_tags_are_rejected() {
        assert!(matches!(
            chunks(&tags(&["O", "X-a"])),
            Err(EvalError::MalformedTag(t)) if t == "X-a"
        ));
        assert!(matches!(
            chunks(&tags(&["B-"])),
            Err(EvalError::MalformedTag(t)) if t == "B-"
        ));
    }

    #[test]
    fn chunk_extraction_matches_the_id_space_extractor() {
        // `chunks` over tag names must agree with `iob_to_spans` over tag ids
        // for every random sequence.
        let slots = VocabMap::from_names(
            ["alpha", "beta", "gamma"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..500 {
            let len = rng.gen_range(1..12);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..7)).collect();
            let names: Vec<String> = ids.iter().map(|&t| tag_name(t, &slots)).collect();
            let by_name = chunks(&names).unwrap();
            let by_id: Vec<(String, usize, usize)> = iob_to_spans(&ids)
                .into_iter()
                .map(|(s, a, b)| (slots.name(s).to_string(), a, b))
                .collect();
            assert_eq!(by_name, by_id, "tags {names:?}");
        }
    }

    // ── act F1 ──

    #[test]
    fn act_f1_hand_fixture() {
        // pred {inform(#)}, gold {inform(#), inform(rest)}: P=1, R=0.5 → 2/3.
        let r = record(
            "d",
            0,
            ("i", &["inform(#)"], &["O"]),
            ("i", &["inform(#)", "inform(rest)"], &["O"]),
        );
        let got = act_f1(&[r], ActAveraging::Micro);
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn act_f1_trivial_cases() {
        let perfect = record("d", 0, ("i", &["a", "b"], &["O"]), ("i", &["a", "b"], &["O"]));
        assert_eq!(act_f1(&[perfect], ActAveraging::Micro), 1.0);
        let empty = record("d", 0, ("i", &[], &["O"]), ("i", &["a"], &["O"]));
        assert_eq!(act_f1(&[empty], ActAveraging::Micro), 0.0);
    }

    #[test]
    fn macro_averaging_differs_from_micro_on_imbalanced_labels() {
        // One turn, pred {a}, gold {a, b}: micro 2/3; macro mean(F1_a=1, F1_b=0) = 0.5.
        let r = record("d", 0, ("i", &["a"], &["O"]), ("i", &["a", "b"], &["O"]));
        assert!((act_f1(std::slice::from_ref(&r), ActAveraging::Micro) - 2.0 / 3.0).abs() < 1e-12);
        assert!((act_f1(&[r], ActAveraging::Macro) - 0.5).abs() < 1e-12);
    }

    // ── intent and frame accuracy ──

    #[test]
    fn intent_accuracy_counts_correct_turns() {
        let records: Vec<TurnRecord> = (0..10)
            .map(|i| {
                let pred = if i < 8 { "yes" } else { "no" };
                record("d", i, (pred, &[], &["O"]), ("yes", &[], &["O"]))
            })
            .collect();
        assert!((intent_accuracy(&records) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn one_wrong_tag_breaks_one_frame() {
        let good = ["B-a", "O"];
        let bad = ["B-a", "I-a"];
        let records = vec![
            record("d", 0, ("i", &["x"], &good), ("i", &["x"], &good)),
            record("d", 1, ("i", &["x"], &bad), ("i", &["x"], &good)),
            record("d", 2, ("i", &["x"], &good), ("i", &["x"], &good)),
        ];
        assert!((frame_accuracy(&records) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_intent_fails_the_frame_regardless_of_slots_and_acts() {
        let t = ["B-a", "O"];
        let r = record("d", 0, ("wrong", &["x"], &t), ("right", &["x"], &t));
        assert_eq!(frame_accuracy(&[r]), 0.0);
    }

    #[test]
    fn frame_accuracy_bounded_by_component_rates_on_random_records() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let intents = ["a", "b"];
        let acts_pool = ["x", "y", "z"];
        let tag_pool = ["O", "B-s", "I-s"];
        let records: Vec<TurnRecord> = (0..300)
            .map(|i| {
                let side = |rng: &mut ChaCha20Rng| {
                    let intent = intents[rng.gen_range(0..2)];
                    let acts: Vec<&str> = acts_pool
                        .iter()
                        .copied()
                        .filter(|_| rng.gen_bool(0.5))
                        .collect();
                    let tags: Vec<&str> =
                        (0..3).map(|_| tag_pool[rng.gen_range(0..3)]).collect();
                    (intent, acts, tags)
                };
                let (pi, pa, pt) = side(&mut rng);
                let (gi, ga, gt) = side(&mut rng);
                record("d", i, (pi, &pa, &pt), (gi, &ga, &gt))
            })
            .collect();
        let m = compute_metrics(&records, ActAveraging::Micro).unwrap();
        assert!(m.frame_accuracy <= m.intent_accuracy + 1e-12);
        assert!(m.frame_accuracy <= m.act_exact_rate + 1e-12);
        assert!(m.frame_accuracy <= m.tag_exact_rate + 1e-12);
        for v in [
            m.intent_accuracy,
            m.act_f1,
            m.slot_chunk_f1,
            m.frame_accuracy,
            m.act_precision,
            m.act_recall,
            m.chunk_precision,
            m.chunk_recall,
        ] {
            assert!((0.0..=1.0).contains(&v), "metric {v} out of range");
        }
    }

    #[test]
    fn metrics_are_invariant_to_record_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let mut records: Vec<TurnRecord> = (0..50)
            .map(|i| {
                let pred_tag = if rng.gen_bool(0.5) { "B-s" } else { "O" };
                record("d", i, ("a", &["x"], &[pred_tag, "O"]), ("a", &["x"], &["B-s", "O"]))
            })
            .collect();
        let before = compute_metrics(&records, ActAveraging::Micro).unwrap();
        records.reverse();
        let after = compute_metrics(&records, ActAveraging::Micro).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn mismatched_tag_lengths_are_rejected() {
        let r = record("d", 0, ("i", &[], &["O", "O"]), ("i", &[], &["O"]));
        assert!(matches!(
            compute_metrics(&[r], ActAveraging::Micro),
            Err(EvalError::MalformedRecord { .. })
        ));
    }

    // ── report ──

    #[test]
    fn report_rolls_up_per_domain_and_overall() {
        let mut r1 = record("a", 0, ("i", &["x"], &["O"]), ("i", &["x"], &["O"]));
        r1.domain = "sim-r".to_string();
        let mut r2 = record("b", 0, ("j", &["x"], &["O"]), ("i", &["x"], &["O"]));
        r2.domain = "sim-m".to_string();
        let rep = report(&[r1, r2], ActAveraging::Micro).unwrap();
        assert_eq!(rep.per_domain.len(), 2);
        assert_eq!(rep.per_domain["sim-r"].frame_accuracy, 1.0);
        assert_eq!(rep.per_domain["sim-m"].frame_accuracy, 0.0);
        assert_eq!(rep.overall.frame_accuracy, 0.5);
        let table = rep.table();
        assert!(table.contains("sim-r") && table.contains("overall"), "{table}");
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    // ── record I/O ──

    #[test]
    fn records_round_trip_through_jsonl() {
        let dir = std::env::temp_dir().join(format!("slu-eval-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dump.jsonl");
        let records = vec![
            record("d1", 0, ("i", &["a"], &["O", "B-s"]), ("i", &["a", "b"], &["O", "B-s"])),
            record("d1", 1, ("j", &[], &["O"]), ("i", &[], &["O"])),
        ];
        write_records(&path, &records).unwrap();
        let loaded = read_records(&path).unwrap();
        assert_eq!(loaded, records);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    // ── McNemar ──

    #[test]
    fn mcnemar_exact_fixtures() {
        // b=10, c=2: discordant count 12 < 25 → exact binomial;
        // p = 2 * (C(12,0)+C(12,1)+C(12,2)) / 2^12 = 79/2048.
        let out = mcnemar_from_counts(10, 2);
        assert!(out.exact);
        assert_eq!(out.statistic, None);
        assert!((out.p_value - 79.0 / 2048.0).abs() < 1e-12);
        assert!(out.significant);

        // The continuity-corrected statistic for the same table clears the
        // 3.841 critical value, agreeing with the exact verdict.
        let chi = continuity_corrected_chi_square(10, 2);
        assert!((chi - 49.0 / 12.0).abs() < 1e-12);
        assert!(chi > 3.841);

        // b=3, c=0: p = 2 * (1/2)^3 = 0.25 → not significant.
        let out = mcnemar_from_counts(3, 0);
        assert!((out.p_value - 0.25).abs() < 1e-12);
        assert!(!out.significant);

        // Balanced discordance is never significant; p capped at 1.
        let out = mcnemar_from_counts(5, 5);
        assert_eq!(out.p_value, 1.0);
        assert!(!out.significant);
    }

    #[test]
    fn mcnemar_chi_square_fixtures() {
        // b=40, c=10: chi^2 = (30-1)^2 / 50 = 16.82; p = erfc(sqrt(8.41)).
        let out = mcnemar_from_counts(40, 10);
        assert!(!out.exact);
        assert!((out.statistic.unwrap() - 16.82).abs() < 1e-12);
        assert!((out.p_value - 4.10978780994588e-5).abs() < 1e-12);
        assert!(out.significant);

        // Large balanced table: chi^2 = 1/40, p ≈ 0.874 → not significant.
        let out = mcnemar_from_counts(20, 20);
        assert!((out.statistic.unwrap() - 0.025).abs() < 1e-12);
        assert!(!out.significant);
        assert!(out.p_value > 0.5);
    }

    #[test]
    fn mcnemar_degenerate_and_symmetry() {
        let zero = mcnemar_from_counts(0, 0);
        assert_eq!(zero.p_value, 1.0);
        assert!(!zero.significant);

        for (b, c) in [(10, 2), (40, 10), (3, 0), (17, 30)] {
            let ab = mcnemar_from_counts(b, c);
            let ba = mcnemar_from_counts(c, b);
            assert_eq!(ab.b, ba.c);
            assert_eq!(ab.c, ba.b);
            assert_eq!(ab.p_value, ba.p_value);
            assert_eq!(ab.significant, ba.significant);
        }
    }

    #[test]
    fn mcnemar_counts_discordant_pairs() {
        let paired = [
            (true, true),
            (true, false),
            (true, false),
            (false, true),
            (false, false),
        ];
        let out = mcnemar(&paired);
        assert_eq!((out.b, out.c), (2, 1));
    }

    #[test]
    fn mcnemar_records_requires_alignment() {
        let a = vec![record("d1", 0, ("i", &[], &["O"]), ("i", &[], &["O"]))];
        let b = vec![record("d2", 0, ("i", &[], &["O"]), ("i", &[], &["O"]))];
        assert!(matches!(mcnemar_records(&a, &b), Err(EvalError::Misaligned(_))));

        let mut b2 = a.clone();
        b2[0].gold_intent = "other".to_string();
        assert!(matches!(mcnemar_records(&a, &b2), Err(EvalError::Misaligned(_))));

        let out = mcnemar_records(&a, &a.clone()).unwrap();
        assert_eq!((out.b, out.c), (0, 0));
    }
}
