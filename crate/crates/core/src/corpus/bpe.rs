use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::BYTE_VOCAB;

/// Byte-level BPE vocabulary: ids 0..256 are raw bytes, id `256 + i` is
/// produced by `merges[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeVocab {
    pub merges: Vec<(u32, u32)>,
    #[serde(skip)]
    token_bytes: Vec<Vec<u8>>,
}

impl BpeVocab {
    /// Rebuilds the byte table from a merge list, rejecting merges that
    /// reference ids not yet defined.
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..BYTE_VOCAB).map(|b| vec![b as u8]).collect();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let defined = token_bytes.len() as u32;
            if a >= defined || b >= defined {
                return Err(invalid(format!(
                    "merge {i} ({a}, {b}) references an undefined token"
                )));
            }
            let mut bytes = token_bytes[a as usize].clone();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(bytes);
        }
        Ok(Self {
            merges,
            token_bytes,
        })
    }

    /// Number of regular (non-special) ids.
    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }
}

fn count_pairs(seq: &[u32]) -> HashMap<(u32, u32), usize> {
    let mut counts = HashMap::new();
    for w in seq.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += 1;
    }
    counts
}

fn apply_merge(seq: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// [`apply_merge`] that keeps `counts` equal to the pair counts of the
/// sequence as it is rewritten.
fn merge_counting(
    seq: &[u32],
    pair: (u32, u32),
    new_id: u32,
    counts: &mut HashMap<(u32, u32), usize>,
) -> Vec<u32> {
    let dec = |counts: &mut HashMap<(u32, u32), usize>, p: (u32, u32)| {
        if let Some(c) = counts.get_mut(&p) {
            *c -= 1;
            if *c == 0 {
                counts.remove(&p);
            }
        }
    };
    let mut out: Vec<u32> = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            dec(counts, pair);
            if let Some(&left) = out.last() {
                dec(counts, (left, seq[i]));
                *counts.entry((left, new_id)).or_insert(0) += 1;
            }
            if let Some(&right) = seq.get(i + 2) {
                dec(counts, (seq[i + 1], right));
                *counts.entry((new_id, right)).or_insert(0) += 1;
            }
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Greedy BPE training: `vocab_size - 256` merges of the most frequent
/// adjacent pair, ties going to the lexicographically smallest pair.
///
/// Stops early only when the sequence has collapsed to a single token.
pub fn bpe_train(corpus: &[u8], vocab_size: usize) -> Result<BpeVocab> {
    if vocab_size <= BYTE_VOCAB {
        return Err(invalid(format!(
            "vocab_size must exceed {BYTE_VOCAB}, got {vocab_size}"
        )));
    }
    if corpus.len() < 2 {
        return Err(invalid("BPE training needs at least 2 bytes of corpus"));
    }
    let mut seq: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
    let mut merges = Vec::with_capacity(vocab_size - BYTE_VOCAB);
    let mut counts = count_pairs(&seq);
    for new_id in BYTE_VOCAB as u32..vocab_size as u32 {
        let best = counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };
        merges.push(pair);
        seq = merge_counting(&seq, pair, new_id, &mut counts);
    }
    BpeVocab::from_merges(merges)
}

/// Encodes text by replaying merges in training order.
pub fn bpe_encode(bytes: &[u8], vocab: &BpeVocab) -> Vec<u32> {
    let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
    for (i, &pair) in vocab.merges.iter().enumerate() {
        if seq.len() < 2 {
            break;
        }
        if seq.windows(2).any(|w| (w[0], w[1]) == pair) {
            seq = apply_merge(&seq, pair, (BYTE_VOCAB + i) as u32);
        }
    }
    seq
}

/// Re-tokenizes byte segments with `vocab`; `byte_len` is kept so BPB
/// denominators match the byte model.
pub fn bpe_segments(segments: &[super::ByteSegment], vocab: &BpeVocab) -> Vec<super::ByteSegment> {
    segments
        .iter()
        .map(|s| super::ByteSegment {
            ids: bpe_encode(&s.bytes(), vocab),
            byte_len: s.byte_len,
        })
        .collect()
}

/// Concatenates token bytes; ids outside the vocabulary (special tokens)
/// contribute nothing.
pub fn bpe_decode(ids: &[u32], vocab: &BpeVocab) -> Vec<u8> {
    ids.iter()
        .filter_map(|&id| vocab.token_bytes(id))
        .flatten()
        .copied()
        .collect()
}
