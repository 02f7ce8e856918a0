//! Span-level evaluation: precision/recall/F1, completely-correct rate,
//! per-role scores, boundary-matched confusion matrix, and the
//! identification-vs-classification split.

use crate::decode::ArgumentSpan;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

/// Predicted and gold span sets for one (sentence, predicate) instance.
pub type SpanSets<'a> = (&'a [ArgumentSpan], &'a [ArgumentSpan]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of predicates whose predicted span set equals gold exactly.
    pub complete: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn filtered<'a>(spans: &'a [ArgumentSpan], score_verb: bool) -> Vec<&'a ArgumentSpan> {
    spans
        .iter()
        .filter(|s| score_verb || s.role != "V")
        .collect()
}

/// Exact-match span scoring over all predicates. The predicate's own V
/// span is excluded unless `score_verb` is set (it is given as input, so
/// scoring it inflates every system equally).
pub fn span_prf(instances: &[SpanSets], score_verb: bool) -> PrfScores {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut complete = 0;
    for (pred, gold) in instances {
        let pred: BTreeSet<&ArgumentSpan> = filtered(pred, score_verb).into_iter().collect();
        let gold: BTreeSet<&ArgumentSpan> = filtered(gold, score_verb).into_iter().collect();
        let hit = pred.intersection(&gold).count();
        tp += hit;
        fp += pred.len() - hit;
        fn_ += gold.len() - hit;
        if pred == gold {
            complete += 1;
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    PrfScores {
        precision,
        recall,
        f1: f1_of(precision, recall),
        complete: ratio(complete, instances.len()),
        tp,
        fp,
        fn_,
    }
}

/// span_prf restricted to each role; roles absent from both sides are
/// omitted. Keyed by role name in sorted order.
pub fn per_label_scores(instances: &[SpanSets], score_verb: bool) -> BTreeMap<String, PrfScores> {
    let mut roles: BTreeSet<String> = BTreeSet::new();
    for (pred, gold) in instances {
        for s in filtered(pred, score_verb) {
            roles.insert(s.role.clone());
        }
        for s in filtered(gold, score_verb) {
            roles.insert(s.role.clone());
        }
    }
    let mut out = BTreeMap::new();
    for role in roles {
        let restricted: Vec<(Vec<ArgumentSpan>, Vec<ArgumentSpan>)> = instances
            .iter()
            .map(|(p, g)| {
                (
                    p.iter().filter(|s| s.role == role).cloned().collect(),
                    g.iter().filter(|s| s.role == role).cloned().collect(),
                )
            })
            .collect();
        let views: Vec<SpanSets> = restricted
            .iter()
            .map(|(p, g)| (p.as_slice(), g.as_slice()))
            .collect();
        out.insert(role, span_prf(&views, score_verb));
    }
    out
}

/// For predicted spans whose boundaries match a gold span but whose role
/// differs: `matrix[gold_role][pred_role]` = percentage of that gold role's
/// confusions going to the predicted role (rows sum to 100 where nonempty).
pub fn confusion_matrix(instances: &[SpanSets]) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (pred, gold) in instances {
        for p in *pred {
            if let Some(g) = gold
                .iter()
                .find(|g| g.start == p.start && g.end == p.end && g.role != p.role)
            {
                *counts
                    .entry(g.role.clone())
                    .or_default()
                    .entry(p.role.clone())
                    .or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(gold_role, row)| {
            let total: usize = row.values().sum();
            let pct = row
                .into_iter()
                .map(|(pr, c)| (pr, 100.0 * c as f64 / total as f64))
                .collect();
            (gold_role, pct)
        })
        .collect()
}

/// Returns (boundary identification accuracy %, role classification
/// accuracy given correctly identified boundaries %): of gold spans, the
/// share whose boundaries appear in the prediction, and of those, the
/// share whose role also matches.
pub fn ident_vs_classify(instances: &[SpanSets]) -> (f64, f64) {
    let mut gold_total = 0;
    let mut ident = 0;
    let mut classified = 0;
    for (pred, gold) in instances {
        for g in *gold {
            gold_total += 1;
            if let Some(p) = pred.iter().find(|p| p.start == g.start && p.end == g.end) {
                ident += 1;
                if p.role == g.role {
                    classified += 1;
                }
            }
        }
    }
    (100.0 * ratio(ident, gold_total), 100.0 * ratio(classified, ident))
}

/// Human-readable evaluation report, ending in machine-readable
/// `key=value` lines for the headline numbers.
pub fn report(instances: &[SpanSets], score_verb: bool) -> String {
    let overall = span_prf(instances, score_verb);
    let per_label = per_label_scores(instances, score_verb);
    let (ident, classify) = ident_vs_classify(instances);
    let confusion = confusion_matrix(instances);

    let mut out = String::new();
    let _ = writeln!(out, "overall: P={:.2} R={:.2} F1={:.2} Comp={:.2}",
        100.0 * overall.precision, 100.0 * overall.recall,
        100.0 * overall.f1, 100.0 * overall.complete);
    let _ = writeln!(out, "identification={ident:.2}% classification={classify:.2}%");
    let _ = writeln!(out, "per-label:");
    for (role, s) in &per_label {
        let _ = writeln!(out, "  {role}: P={:.2} R={:.2} F1={:.2}",
            100.0 * s.precision, 100.0 * s.recall, 100.0 * s.f1);
    }
    if !confusion.is_empty() {
        let _ = writeln!(out, "confusions (gold -> predicted, % of that gold role's errors):");
        for (gold_role, row) in &confusion {
            for (pred_role, pct) in row {
                let _ = writeln!(out, "  {gold_role} -> {pred_role}: {pct:.1}%");
            }
        }
    }
    let _ = writeln!(out, "precision={:.4}", overall.precision);
    let _ = writeln!(out, "recall={:.4}", overall.recall);
    let _ = writeln!(out, "f1={:.4}", overall.f1);
    let _ = writeln!(out, "comp={:.4}", overall.complete);
    out
}
