//! BIO tag inventory, argmax and constrained (Viterbi) decoding, and span
//! extraction with repair of invalid tag transitions.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// Ordered BIO label inventory: `O` first, then `B-X`, `I-X` per role in
/// sorted order. Ids are stable across runs for a given role set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    labels: Vec<String>,
    roles: Vec<String>,
}

impl TagSet {
    pub fn from_roles<S: AsRef<str>>(roles: &[S]) -> Self {
        let sorted: BTreeSet<String> = roles.iter().map(|r| r.as_ref().to_string()).collect();
        let roles: Vec<String> = sorted.into_iter().collect();
        let mut labels = vec!["O".to_string()];
        for r in &roles {
            labels.push(format!("B-{r}"));
            labels.push(format!("I-{r}"));
        }
        TagSet { labels, roles }
    }

    /// Collect roles from every B-/I- tag in a corpus' tag sequences.
    pub fn from_tag_strings<'a, I: IntoIterator<Item = &'a str>>(tags: I) -> Self {
        let roles: Vec<&str> = tags
            .into_iter()
            .filter_map(|t| t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")))
            .collect();
        Self::from_roles(&roles)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Data(format!("unknown tag '{label}'")))
    }

    /// Role name for a B-/I- tag id, None for O.
    pub fn role_of(&self, id: usize) -> Option<&str> {
        self.labels[id]
            .strip_prefix("B-")
            .or_else(|| self.labels[id].strip_prefix("I-"))
    }

    fn is_inside(&self, id: usize) -> bool {
        self.labels[id].starts_with("I-")
    }

    /// BIO transition validity: I-X may follow only B-X or I-X; the first
    /// tag may not be any I-*. O and B-* are unconstrained.
    pub fn valid_transition(&self, prev: Option<usize>, next: usize) -> bool {
        if !self.is_inside(next) {
            return true;
        }
        match prev {
            None => false,
            Some(p) => self.role_of(p) == self.role_of(next) && self.labels[p] != "O",
        }
    }

    pub fn is_valid_sequence(&self, tags: &[usize]) -> bool {
        let mut prev = None;
        for &t in tags {
            if !self.valid_transition(prev, t) {
                return false;
            }
            prev = Some(t);
        }
        true
    }
}

/// Per-row argmax over an n×K score matrix; ties go to the lowest id.
pub fn argmax_decode<T: Real>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = scores.dims2()?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0;
        for j in 1..k {
            if scores.at2(i, j) > scores.at2(i, best) {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Highest-total-score sequence under BIO transition constraints, by
/// Viterbi dynamic programming. Ties break toward the lowest tag id at
/// each position (both in state scores and backpointers).
pub fn constrained_decode<T: Real>(log_probs: &Tensor<T>, tagset: &TagSet) -> Result<Vec<usize>> {
    let (n, k) = log_probs.dims2()?;
    if k != tagset.len() {
        return Err(Error::Shape(format!(
            "score matrix has {k} columns but tag set has {} labels",
            tagset.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let neg_inf = f64::NEG_INFINITY;
    let mut score = vec![neg_inf; k];
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n);
    for j in 0..k {
        if tagset.valid_transition(None, j) {
            score[j] = log_probs.at2(0, j).to_f64();
        }
    }
    back.push(vec![0; k]);
    for i in 1..n {
        let mut next = vec![neg_inf; k];
        let mut ptr = vec![0; k];
        for j in 0..k {
            for p in 0..k {
                if score[p] == neg_inf || !tagset.valid_transition(Some(p), j) {
                    continue;
                }
                let cand = score[p] + log_probs.at2(i, j).to_f64();
                if cand > next[j] {
                    next[j] = cand;
                    ptr[j] = p;
                }
            }
        }
        score = next;
        back.push(ptr);
    }
    let mut best = 0;
    for j in 1..k {
        if score[j] > score[best] {
            best = j;
        }
    }
    let mut tags = vec![0; n];
    tags[n - 1] = best;
    for i in (1..n).rev() {
        tags[i - 1] = back[i][tags[i]];
    }
    Ok(tags)
}

/// Labeled token span, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArgumentSpan {
    pub start: usize,
    pub end: usize,
    pub role: String,
}

impl ArgumentSpan {
    pub fn new(start: usize, end: usize, role: impl Into<String>) -> Self {
        ArgumentSpan {
            start,
            end,
            role: role.into(),
        }
    }
}

/// Extract spans from a tag sequence, repairing invalid transitions:
/// a maximal B-led run keeps the B tag's role regardless of interior I
/// labels; an I-X with no open span opens one with role X; O closes any
/// open span.
pub fn tags_to_spans(tags: &[usize], tagset: &TagSet) -> Vec<ArgumentSpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, &t) in tags.iter().enumerate() {
        let label = tagset.label(t);
        if label == "O" {
            if let Some((start, role)) = open.take() {
                spans.push(ArgumentSpan::new(start, i - 1, role));
            }
        } else if let Some(role) = label.strip_prefix("B-") {
            if let Some((start, prev_role)) = open.take() {
                spans.push(ArgumentSpan::new(start, i - 1, prev_role));
            }
            open = Some((i, role.to_string()));
        } else if let Some(role) = label.strip_prefix("I-") {
            if open.is_none() {
                open = Some((i, role.to_string()));
            }
        }
    }
    if let Some((start, role)) = open {
        spans.push(ArgumentSpan::new(start, tags.len() - 1, role));
    }
    spans
}

/// Inverse writer for valid non-overlapping span sets; test utility.
pub fn spans_to_tags(spans: &[ArgumentSpan], len: usize, tagset: &TagSet) -> Result<Vec<usize>> {
    let o = tagset.id("O")?;
    let mut tags = vec![o; len];
    for s in spans {
        if s.end >= len || s.start > s.end {
            return Err(Error::Data(format!(
                "span ({}, {}) out of range for length {len}",
                s.start, s.end
            )));
        }
        tags[s.start] = tagset.id(&format!("B-{}", s.role))?;
        let inside = tagset.id(&format!("I-{}", s.role))?;
        for t in tags.iter_mut().take(s.end + 1).skip(s.start + 1) {
            if *t != o {
                return Err(Error::Data("overlapping spans".into()));
            }
            *t = inside;
        }
    }
    Ok(tags)
}
