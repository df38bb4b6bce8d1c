use proptest::prelude::*;
use qptrain::data::{synthetic, TokenizedCorpus};

fn corpus() -> TokenizedCorpus {
    TokenizedCorpus::from_documents(&[synthetic::generate(11, 6_000), synthetic::generate(12, 3_000)], 0.1).unwrap()
}

fn contains(hay: &[u32], needle: &[u32]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn training_windows_come_from_the_training_split(step in 0u64..1_000_000, seed in any::<u64>(), batch in 1usize..5, seq in 1usize..64) {
        let c = corpus();
        let block = c.batch(step, seed, batch, seq).unwrap();
        prop_assert_eq!(block.cols, seq + 1);
        for i in 0..batch {
            prop_assert!(contains(c.train(), block.row(i)));
        }
        prop_assert_eq!(block, c.batch(step, seed, batch, seq).unwrap());
    }

    #[test]
    fn a_slot_depends_only_on_step_seed_and_position(step in 0u64..1000, seed in any::<u64>(), seq in 1usize..32) {
        let c = corpus();
        let small = c.batch(step, seed, 2, seq).unwrap();
        let large = c.batch(step, seed, 5, seq).unwrap();
        prop_assert_eq!(small.row(0), large.row(0));
        prop_assert_eq!(small.row(1), large.row(1));
    }
}

#[test]
fn splits_partition_the_stream() {
    let c = corpus();
    assert_eq!(c.train().len() + c.val().len(), c.len());
    assert_eq!([c.train(), c.val()].concat(), c.ids());
    assert!(c.ids().iter().all(|&t| (t as usize) < c.vocab_size()));
    for w in c.val_windows(32, 100) {
        assert!(contains(c.val(), w));
        assert_eq!(w.len(), 33);
    }
}

#[test]
fn cache_round_trips() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    c.save(&path).unwrap();
    let back = TokenizedCorpus::load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.digest_hex(), c.digest_hex());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(TokenizedCorpus::load(&path).is_err());
}

#[test]
fn content_changes_the_digest() {
    let a = TokenizedCorpus::from_documents(&["abc"], 0.0).unwrap();
    let b = TokenizedCorpus::from_documents(&["abd"], 0.0).unwrap();
    let split = TokenizedCorpus::from_documents(&["ab", "c"], 0.0).unwrap();
    assert_ne!(a.digest_hex(), b.digest_hex());
    assert_ne!(a.digest_hex(), split.digest_hex());
}
