//! Deterministic English-like text for offline experiments.
//!
//! Sentences come from a small phrase grammar with a Zipf-skewed vocabulary,
//! which gives a byte-level model both short-range (spelling) and
//! longer-range (agreement, punctuation, paragraph) structure to learn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NOUNS: &[&str] = &[
    "model", "river", "teacher", "garden", "signal", "window", "machine", "city", "letter", "forest",
    "engine", "student", "market", "bridge", "planet", "harbor", "record", "kitchen", "station",
    "painter", "circuit", "valley", "library", "farmer", "council", "winter", "theory", "island",
    "doctor", "network", "village", "message", "mountain", "engineer", "question", "history",
];
const VERBS: &[(&str, &str)] = &[
    ("sees", "see"), ("builds", "build"), ("finds", "find"), ("moves", "move"),
    ("follows", "follow"), ("carries", "carry"), ("opens", "open"), ("measures", "measure"),
    ("changes", "change"), ("remembers", "remember"), ("watches", "watch"), ("explains", "explain"),
    ("repairs", "repair"), ("describes", "describe"), ("reaches", "reach"), ("holds", "hold"),
];
const ADJECTIVES: &[&str] = &[
    "small", "quiet", "bright", "old", "careful", "distant", "heavy", "simple", "green", "strange",
    "quick", "narrow", "warm", "broken", "early", "famous",
];
const ADVERBS: &[&str] = &["slowly", "again", "today", "often", "never", "almost", "quietly", "soon"];
const PLACES: &[&str] = &[
    "near the river", "after the storm", "in the morning", "under the bridge", "at the station",
    "before winter", "across the valley", "inside the library",
];
const CONNECTIVES: &[&str] = &["because", "while", "although", "when", "and then", "so"];

fn zipf<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    // rank r chosen with probability proportional to 1 / (r + 1)
    let total: f64 = (1..=items.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for (r, item) in items.iter().enumerate() {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return item;
        }
    }
    &items[items.len() - 1]
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut String, plural: bool) {
    out.push_str(if rng.random_bool(0.6) { "the " } else if plural { "some " } else { "a " });
    if rng.random_bool(0.4) {
        out.push_str(zipf(rng, ADJECTIVES));
        out.push(' ');
    }
    out.push_str(zipf(rng, NOUNS));
    if plural {
        out.push('s');
    }
}

fn clause(rng: &mut ChaCha8Rng, out: &mut String) {
    let plural = rng.random_bool(0.3);
    noun_phrase(rng, out, plural);
    out.push(' ');
    if rng.random_bool(0.2) {
        out.push_str(zipf(rng, ADVERBS));
        out.push(' ');
    }
    let (singular, base) = zipf(rng, VERBS);
    out.push_str(if plural { base } else { singular });
    out.push(' ');
    let object_plural = rng.random_bool(0.3);
    noun_phrase(rng, out, object_plural);
    if rng.random_bool(0.35) {
        out.push(' ');
        out.push_str(zipf(rng, PLACES));
    }
}

fn sentence(rng: &mut ChaCha8Rng, out: &mut String) {
    let start = out.len();
    clause(rng, out);
    if rng.random_bool(0.3) {
        out.push_str(", ");
        out.push_str(zipf(rng, CONNECTIVES));
        out.push(' ');
        clause(rng, out);
    }
    if rng.random_bool(0.1) {
        out.push_str(&format!(" {} times", rng.random_range(2..20)));
    }
    if let Some(first) = out[start..].chars().next() {
        let upper = first.to_ascii_uppercase().to_string();
        out.replace_range(start..start + first.len_utf8(), &upper);
    }
    out.push(if rng.random_bool(0.1) { '?' } else { '.' });
}

/// Roughly `bytes` bytes of text (cut at a sentence boundary past the target).
pub fn generate(seed: u64, bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let sentences = rng.random_range(3..8);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            sentence(&mut rng, &mut out);
        }
        out.push_str("\n\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = generate(3, 10_000);
        assert_eq!(a, generate(3, 10_000));
        assert_ne!(a, generate(4, 10_000));
        assert!(a.len() >= 10_000 && a.len() < 11_000);
        assert!(a.is_ascii());
    }
}
