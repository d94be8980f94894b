mod common;

use aesn::corpus::{decode_spans, to_bio, to_bioes};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn bioes_round_trip(seed in any::<u64>(), max_len in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bio, spans) = common::random_bio(&mut rng, max_len);
        let (bioes, repairs) = to_bioes(&bio).unwrap();
        prop_assert_eq!(repairs, 0);
        prop_assert_eq!(decode_spans(&bioes).unwrap(), spans);
        prop_assert_eq!(to_bio(&bioes).unwrap(), bio);
        prop_assert_eq!(to_bioes(&bioes).unwrap().0, bioes);
    }

    #[test]
    fn repaired_sequences_decode_cleanly(labels in prop::collection::vec(
        prop::sample::select(vec!["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]), 0..15)
    ) {
        let labels: Vec<String> = labels.into_iter().map(String::from).collect();
        let (bioes, _) = to_bioes(&labels).unwrap();
        // every non-O token of a repaired sequence belongs to exactly one span
        let spans = decode_spans(&bioes).unwrap();
        let covered: usize = spans.iter().map(|s| s.end - s.start + 1).sum();
        prop_assert_eq!(covered, labels.iter().filter(|l| *l != "O").count());
    }
}
