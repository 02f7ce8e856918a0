//! Synthetic SRL corpus shared by the integration suites.
//!
//! Tags are a pure function of a token's position relative to the
//! predicate, so the task is fully learnable from the predicate mask and
//! position information: B-A0/I-A0 run up to the predicate, B-V on it,
//! then B-A1 I-A1 B-A2 B-AM, and O beyond.

use deepatt::data::LabeledSentence;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const ROLES: [&str; 5] = ["A0", "A1", "A2", "AM", "V"];

pub fn tag_for(i: usize, pred: usize) -> String {
    if i == pred {
        "B-V".into()
    } else if i < pred {
        if i == 0 { "B-A0".into() } else { "I-A0".into() }
    } else {
        match i - pred {
            1 => "B-A1".into(),
            2 => "I-A1".into(),
            3 => "B-A2".into(),
            4 => "B-AM".into(),
            _ => "O".into(),
        }
    }
}

/// `count` sentences over a vocabulary of at most 38 surface forms
/// (30 nouns + 8 verbs), lengths 5..=9.
pub fn synthetic_corpus(count: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(5..=9);
            let pred = rng.gen_range(1..n - 1);
            let words = (0..n)
                .map(|i| {
                    if i == pred {
                        format!("v{}", rng.gen_range(0..8))
                    } else {
                        format!("w{}", rng.gen_range(0..30))
                    }
                })
                .collect();
            let mask = (0..n).map(|i| u8::from(i == pred)).collect();
            let tags = (0..n).map(|i| tag_for(i, pred)).collect();
            LabeledSentence { words, mask, tags: Some(tags) }
        })
        .collect()
}
