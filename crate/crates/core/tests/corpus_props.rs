use std::sync::OnceLock;

use proptest::prelude::*;
use synergy_core::corpus::{bpe_decode, bpe_encode, bpe_train, clip_segments, utf8_detokenize, utf8_tokenize, BpeVocab};

fn vocab() -> &'static BpeVocab {
    static V: OnceLock<BpeVocab> = OnceLock::new();
    V.get_or_init(|| {
        let text = "the cat sat on the mat; the dog ate the hat. ünïcödé bytes é字\u{1F600} and more text text text ".repeat(40);
        bpe_train(text.as_bytes(), 400).unwrap()
    })
}

/// True when `text` is the segments joined by nothing or by one
/// whitespace byte each (plus at most one trailing whitespace byte).
fn rebuilds(text: &[u8], segs: &[Vec<u8>]) -> bool {
    fn go(text: &[u8], segs: &[Vec<u8>], first: bool) -> bool {
        match segs.split_first() {
            // a split may consume one trailing whitespace byte
            None => text.is_empty() || (!first && text.len() == 1 && text[0].is_ascii_whitespace()),
            Some((s, rest)) => {
                let direct = text.starts_with(s) && go(&text[s.len()..], rest, false);
                direct
                    || (!first
                        && text.first().is_some_and(|b| b.is_ascii_whitespace())
                        && text[1..].starts_with(s)
                        && go(&text[1 + s.len()..], rest, false))
            }
        }
    }
    go(text, segs, true)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn utf8_round_trip(s in any::<String>()) {
        let ids = utf8_tokenize(s.as_bytes()).unwrap();
        prop_assert_eq!(ids.len(), s.len());
        prop_assert_eq!(utf8_detokenize(&ids), s.as_bytes());
    }

    #[test]
    fn bpe_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let v = vocab();
        let ids = bpe_encode(&bytes, v);
        prop_assert!(ids.len() <= bytes.len());
        prop_assert!(ids.iter().all(|&i| (i as usize) < v.size()));
        prop_assert_eq!(bpe_decode(&ids, v), bytes);
    }

    #[test]
    fn segments_respect_codepoints(s in "[a-zé字\u{1F600} \n\t.]{0,120}", max in 6usize..40) {
        let segs = clip_segments(&s, max).unwrap();
        let raw: Vec<Vec<u8>> = segs.iter().map(|g| g.bytes()).collect();
        for g in &raw {
            prop_assert!(!g.is_empty() && g.len() <= max - 2);
            prop_assert!(std::str::from_utf8(g).is_ok());
        }
        prop_assert!(rebuilds(s.as_bytes(), &raw));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn segments_of_arbitrary_text(s in any::<String>(), max in 6usize..64) {
        let segs = clip_segments(&s, max).unwrap();
        let raw: Vec<Vec<u8>> = segs.iter().map(|g| g.bytes()).collect();
        for g in &raw {
            prop_assert!(std::str::from_utf8(g).is_ok());
            prop_assert!(g.len() <= max - 2);
        }
        prop_assert!(rebuilds(s.as_bytes(), &raw));
    }
}

#[test]
fn invalid_utf8_is_rejected() {
    assert!(utf8_tokenize(&[0xC3]).is_err());
    assert!(utf8_tokenize(&[0xFF, 0x41]).is_err());
    assert_eq!(utf8_tokenize("é".as_bytes()).unwrap(), vec![195, 169]);
}

