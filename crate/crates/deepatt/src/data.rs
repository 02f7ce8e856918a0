//! Corpus ingestion, vocabulary construction, pretrained-embedding loading
//! and token-budget batching.
//!
//! Corpus files are a three-column whitespace-separated vertical format,
//! one token per line (`word mask tag`), sentences separated by blank
//! lines. The tag column may be omitted for inference inputs.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// One (sentence, predicate) training or inference instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub words: Vec<String>,
    /// 1 on predicate tokens, 0 elsewhere; exactly one contiguous run of 1s.
    pub mask: Vec<u8>,
    /// BIO labels; absent for untagged inference inputs.
    pub tags: Option<Vec<String>>,
}

impl LabeledSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn validate_sentence(s: &LabeledSentence, line: usize) -> Result<()> {
    if s.words.is_empty() {
        return Err(Error::Parse {
            line,
            msg: "empty sentence".into(),
        });
    }
    let ones: Vec<usize> = s
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1)
        .map(|(i, _)| i)
        .collect();
    if ones.is_empty() {
        return Err(Error::Parse {
            line,
            msg: "sentence has no predicate (no mask 1)".into(),
        });
    }
    if ones.last().unwrap() - ones[0] + 1 != ones.len() {
        return Err(Error::Parse {
            line,
            msg: "predicate mask is not one contiguous region".into(),
        });
    }
    Ok(())
}

fn valid_tag(tag: &str) -> bool {
    tag == "O" || tag.starts_with("B-") || tag.starts_with("I-")
}

/// Parse the vertical corpus format. `line` numbers in errors are 1-based.
pub fn parse_corpus_str(text: &str) -> Result<Vec<LabeledSentence>> {
    let mut sentences = Vec::new();
    let mut words = Vec::new();
    let mut mask = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut has_tags: Option<bool> = None;
    let mut sent_start = 1;

    let mut flush = |words: &mut Vec<String>,
                     mask: &mut Vec<u8>,
                     tags: &mut Vec<String>,
                     has_tags: &mut Option<bool>,
                     sent_start: usize|
     -> Result<()> {
        if words.is_empty() {
            return Ok(());
        }
        let s = LabeledSentence {
            words: std::mem::take(words),
            mask: std::mem::take(mask),
            tags: if *has_tags == Some(true) {
                Some(std::mem::take(tags))
            } else {
                tags.clear();
                None
            },
        };
        validate_sentence(&s, sent_start)?;
        sentences.push(s);
        *has_tags = None;
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut words, &mut mask, &mut tags, &mut has_tags, sent_start)?;
            sent_start = lineno + 1;
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let tagged = match cols.len() {
            2 => false,
            3 => true,
            n => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 2 or 3 columns, got {n}"),
                })
            }
        };
        match has_tags {
            None => has_tags = Some(tagged),
            Some(expect) if expect != tagged => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "ragged columns within a sentence".into(),
                })
            }
            _ => {}
        }
        let m = match cols[1] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("mask value '{other}' is not 0 or 1"),
                })
            }
        };
        if tagged && !valid_tag(cols[2]) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("unknown tag prefix in '{}'", cols[2]),
            });
        }
        words.push(cols[0].to_string());
        mask.push(m);
        if tagged {
            tags.push(cols[2].to_string());
        }
    }
    flush(&mut words, &mut mask, &mut tags, &mut has_tags, sent_start)?;
    Ok(sentences)
}

pub fn parse_corpus(path: &Path) -> Result<Vec<LabeledSentence>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    parse_corpus_str(&text)
}

pub fn serialize_corpus(sentences: &[LabeledSentence]) -> String {
    let mut out = String::new();
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for t in 0..s.len() {
            match &s.tags {
                Some(tags) => {
                    let _ = writeln!(out, "{} {} {}", s.words[t], s.mask[t], tags[t]);
                }
                None => {
                    let _ = writeln!(out, "{} {}", s.words[t], s.mask[t]);
                }
            }
        }
    }
    out
}

/// Bidirectional word/id map with reserved pad and unknown entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Deterministic construction: sort by (frequency desc, lexicographic).
    pub fn build(corpus: &[LabeledSentence], min_count: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in corpus {
            for w in &s.words {
                *freq.entry(w.as_str()).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut words = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        words.extend(entries.into_iter().map(|(w, _)| w.to_string()));
        Ok(Self::from_words(words))
    }

    /// Words in id order; ids 0 and 1 must be the reserved entries.
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words, index }
    }

    /// Exact-match lookup, then lowercase fallback, then `<unk>`.
    pub fn id(&self, word: &str) -> usize {
        if let Some(&i) = self.index.get(word) {
            return i;
        }
        if let Some(&i) = self.index.get(word.to_lowercase().as_str()) {
            return i;
        }
        UNK_ID
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Overwrite in-vocabulary rows of an embedding table from a text file of
/// `word v1 ... v_dim` lines. Out-of-vocabulary rows keep their
/// initialization; the table stays trainable.
pub fn load_pretrained_embeddings<T: Real>(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    table: &mut Tensor<T>,
) -> Result<usize> {
    if table.shape() != [vocab.len(), dim] {
        return Err(Error::Shape(format!(
            "embedding table shape {:?} does not match |V|={} x dim={}",
            table.shape(),
            vocab.len(),
            dim
        )));
    }
    let mut loaded = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().unwrap();
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!(
                    "embedding for '{}' has {} values, expected {}",
                    word,
                    values.len(),
                    dim
                ),
            });
        }
        if let Some(&id) = vocab.index.get(word) {
            for (j, v) in values.iter().enumerate() {
                let parsed: f64 = v.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad float '{v}'"),
                })?;
                table.data_mut()[id * dim + j] = T::from_f64(parsed);
            }
            loaded += 1;
        }
    }
    Ok(loaded)
}

/// Shuffle by seed, bucket by similar length, then greedily fill batches so
/// that `batch_size * max_len <= budget` counting padding. Returns indices
/// into the corpus.
pub fn batch_by_tokens(
    lengths: &[usize],
    budget: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    for (i, &len) in lengths.iter().enumerate() {
        if len > budget {
            return Err(Error::Data(format!(
                "sentence {i} has {len} tokens, above the batch budget {budget}"
            )));
        }
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    // stable sort keeps the shuffled order within each length bucket
    order.sort_by_key(|&i| lengths[i]);

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0usize;
    for &i in &order {
        let max_len = cur_max.max(lengths[i]);
        if !cur.is_empty() && (cur.len() + 1) * max_len > budget {
            batches.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(lengths[i]);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "Marry 0 B-ARG0\nborrowed 1 B-V\na 0 B-ARG1\nbook 0 I-ARG1\n";

    #[test]
    fn parses_the_canonical_example() {
        let corpus = parse_corpus_str(SAMPLE).unwrap();
        assert_eq!(corpus.len(), 1);
        let s = &corpus[0];
        assert_eq!(s.words, vec!["Marry", "borrowed", "a", "book"]);
        assert_eq!(s.mask, vec![0, 1, 0, 0]);
        assert_eq!(
            s.tags.as_ref().unwrap(),
            &vec!["B-ARG0", "B-V", "B-ARG1", "I-ARG1"]
        );
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus_str("").unwrap().is_empty());
        assert!(parse_corpus_str("\n\n").unwrap().is_empty());
    }

    #[test]
    fn bad_mask_names_the_line() {
        let text = "a 0 O\nb 2 O\n";
        match parse_corpus_str(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_columns_rejected() {
        let text = "a 0 O\nb 1\n";
        assert!(matches!(
            parse_corpus_str(text),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_tag_prefix_rejected() {
        let text = "a 1 X-FOO\n";
        assert!(parse_corpus_str(text).is_err());
    }

    #[test]
    fn predicate_must_be_present_and_contiguous() {
        assert!(parse_corpus_str("a 0 O\nb 0 O\n").is_err());
        assert!(parse_corpus_str("a 1 B-V\nb 0 O\nc 1 O\n").is_err());
        assert!(parse_corpus_str("a 1 B-V\nb 1 I-V\n").is_ok());
    }

    #[test]
    fn untagged_mode_parses() {
        let corpus = parse_corpus_str("a 0\nb 1\n").unwrap();
        assert!(corpus[0].tags.is_none());
    }

    #[test]
    fn parse_serialize_round_trip() {
        let corpus = parse_corpus_str(SAMPLE).unwrap();
        let text = serialize_corpus(&corpus);
        assert_eq!(parse_corpus_str(&text).unwrap(), corpus);
    }

    proptest! {
        #[test]
        fn round_trip_random_corpora(sent_count in 1usize..4, seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut corpus = Vec::new();
            for _ in 0..sent_count {
                let n = 1 + (rand::Rng::gen::<usize>(&mut rng) % 6);
                let pred = rand::Rng::gen::<usize>(&mut rng) % n;
                let words: Vec<String> =
                    (0..n).map(|i| format!("w{}", (i * 7 + seed as usize) % 13)).collect();
                let mask: Vec<u8> = (0..n).map(|i| u8::from(i == pred)).collect();
                let tags: Vec<String> =
                    (0..n).map(|i| if i == pred { "B-V".into() } else { "O".into() }).collect();
                corpus.push(LabeledSentence { words, mask, tags: Some(tags) });
            }
            let text = serialize_corpus(&corpus);
            prop_assert_eq!(parse_corpus_str(&text).unwrap(), corpus);
        }
    }

    #[test]
    fn vocab_reserved_ids_and_unknown_lookup() {
        let corpus = parse_corpus_str(SAMPLE).unwrap();
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.word(PAD_ID), Some(PAD_TOKEN));
        assert_eq!(v.word(UNK_ID), Some(UNK_TOKEN));
        assert_eq!(v.id("never-seen"), UNK_ID);
        let id = v.id("book");
        assert_eq!(v.word(id), Some("book"));
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let corpus = parse_corpus_str("b 1 B-V\na 0 O\n").unwrap();
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
    }

    #[test]
    fn min_count_excludes_singletons() {
        let corpus =
            parse_corpus_str("a 1 B-V\na 0 O\nrare 0 O\n").unwrap();
        let v = Vocabulary::build(&corpus, 2).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("rare"), UNK_ID);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocab_lowercase_fallback() {
        let corpus = parse_corpus_str("apple 1 B-V\n").unwrap();
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v.id("Apple"), v.id("apple"));
    }

    #[test]
    fn vocab_is_order_independent() {
        let a = parse_corpus_str("x 1 B-V\ny 0 O\n\nz 1 B-V\n").unwrap();
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            Vocabulary::build(&a, 1).unwrap(),
            Vocabulary::build(&b, 1).unwrap()
        );
    }

    #[test]
    fn pretrained_rows_overwritten_only_for_vocab_words() {
        let corpus = parse_corpus_str("cat 1 B-V\ndog 0 O\n").unwrap();
        let v = Vocabulary::build(&corpus, 1).unwrap();
        let mut table = Tensor::<f64>::filled(vec![v.len(), 2], 9.0);
        let loaded =
            load_pretrained_embeddings("cat 1.0 2.0\nbird 3.0 4.0\n", &v, 2, &mut table).unwrap();
        assert_eq!(loaded, 1);
        let cat = v.id("cat");
        assert_eq!(table.at2(cat, 0), 1.0);
        assert_eq!(table.at2(cat, 1), 2.0);
        let dog = v.id("dog");
        assert_eq!(table.at2(dog, 0), 9.0);
    }

    #[test]
    fn pretrained_dim_mismatch_is_error() {
        let corpus = parse_corpus_str("cat 1 B-V\n").unwrap();
        let v = Vocabulary::build(&corpus, 1).unwrap();
        let mut table = Tensor::<f64>::zeros(vec![v.len(), 3]);
        let res = load_pretrained_embeddings("cat 1.0 2.0\n", &v, 3, &mut table);
        assert!(matches!(res, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn batching_examples() {
        // budget 10, lengths 5,5,5: two batches of sizes 2 and 1
        let batches = batch_by_tokens(&[5, 5, 5], 10, 0).unwrap();
        let mut sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 2]);
        // one sentence exactly at budget: singleton batch
        let batches = batch_by_tokens(&[10], 10, 0).unwrap();
        assert_eq!(batches, vec![vec![0]]);
        // over budget: data error
        assert!(batch_by_tokens(&[11], 10, 0).is_err());
        // determinism
        assert_eq!(
            batch_by_tokens(&[3, 7, 2, 9, 4, 4], 12, 5).unwrap(),
            batch_by_tokens(&[3, 7, 2, 9, 4, 4], 12, 5).unwrap()
        );
    }

    proptest! {
        #[test]
        fn every_batch_respects_budget(
            lengths in proptest::collection::vec(1usize..20, 1..40),
            seed in 0u64..100,
        ) {
            let budget = 32usize;
            let batches = batch_by_tokens(&lengths, budget, seed).unwrap();
            let mut seen: Vec<usize> = Vec::new();
            for b in &batches {
                let max_len = b.iter().map(|&i| lengths[i]).max().unwrap();
                prop_assert!(b.len() * max_len <= budget);
                seen.extend(b);
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lengths.len()).collect::<Vec<_>>());
        }
    }
}
