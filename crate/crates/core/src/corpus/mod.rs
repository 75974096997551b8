//! Text ingestion: UTF-8 byte tokenization, segment clipping, corpus
//! splitting and batch construction.

mod bpe;
mod io;

pub use bpe::{bpe_decode, bpe_encode, bpe_segments, bpe_train, BpeVocab};
pub use io::{
    read_documents, read_segment_shard, read_vocab, write_segment_shard, write_vocab,
    SEGMENT_MAGIC, SEGMENT_VERSION, VOCAB_MAGIC, VOCAB_VERSION,
};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Number of plain byte values before the special tokens start.
pub const BYTE_VOCAB: usize = 256;

/// Framing tokens appended after a base vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

impl SpecialTokens {
    /// Special tokens placed directly after `base_vocab` regular ids.
    pub fn after(base_vocab: usize) -> Self {
        let b = base_vocab as u32;
        Self {
            bos: b,
            eos: b + 1,
            pad: b + 2,
        }
    }

    /// bos=256, eos=257, pad=258.
    pub fn bytes() -> Self {
        Self::after(BYTE_VOCAB)
    }

    pub const COUNT: usize = 3;

    pub fn is_special(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }
}

/// Vocabulary size of the byte model: 256 bytes plus the special tokens.
pub const BYTE_VOCAB_SIZE: usize = BYTE_VOCAB + SpecialTokens::COUNT;

/// A clipped sample of text, as token ids without framing tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteSegment {
    pub ids: Vec<u32>,
    /// Raw UTF-8 bytes this segment represents.
    pub byte_len: usize,
}

impl ByteSegment {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            ids: bytes.iter().map(|&b| b as u32).collect(),
            byte_len: bytes.len(),
        }
    }

    /// Bytes of a byte-tokenized segment. Non-byte ids are skipped.
    pub fn bytes(&self) -> Vec<u8> {
        self.ids
            .iter()
            .filter(|&&id| (id as usize) < BYTE_VOCAB)
            .map(|&id| id as u8)
            .collect()
    }
}

/// Token ids are exactly the UTF-8 bytes of the input.
pub fn utf8_tokenize(text: &[u8]) -> Result<Vec<u32>> {
    std::str::from_utf8(text)?;
    Ok(text.iter().map(|&b| b as u32).collect())
}

/// Inverse of [`utf8_tokenize`]; special and out-of-range ids are dropped.
pub fn utf8_detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter(|&&id| (id as usize) < BYTE_VOCAB)
        .map(|&id| id as u8)
        .collect()
}

fn is_split_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

fn is_char_boundary(bytes: &[u8], i: usize) -> bool {
    i == 0 || i >= bytes.len() || (bytes[i] & 0xC0) != 0x80
}

/// Splits `text` into segments of at most `max_bytes - 2` bytes, leaving
/// room for bos/eos.
///
/// A split lands on the last whitespace byte inside the window (that byte is
/// consumed by the split); without whitespace it lands on the last codepoint
/// boundary that fits.
pub fn clip_segments(text: &str, max_bytes: usize) -> Result<Vec<ByteSegment>> {
    // a 4-byte codepoint must always fit between bos and eos
    if max_bytes < 6 {
        return Err(invalid(format!("max_bytes must be >= 6, got {max_bytes}")));
    }
    let budget = max_bytes - 2;
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = bytes.len() - pos;
        if rest <= budget {
            out.push(ByteSegment::from_bytes(&bytes[pos..]));
            break;
        }
        let limit = pos + budget;
        // split before a whitespace byte at index b, pos < b <= limit
        let space = (pos + 1..=limit).rev().find(|&b| is_split_space(bytes[b]));
        match space {
            Some(b) => {
                out.push(ByteSegment::from_bytes(&bytes[pos..b]));
                pos = b + 1;
            }
            None => {
                let b = (pos + 1..=limit)
                    .rev()
                    .find(|&b| is_char_boundary(bytes, b))
                    .expect("a codepoint boundary exists within any 4-byte window");
                out.push(ByteSegment::from_bytes(&bytes[pos..b]));
                pos = b;
            }
        }
    }
    Ok(out)
}

/// Deterministic train/eval/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub eval: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles rows with a seeded generator, then takes
/// `round(n * train_fraction)` rows for training. The remainder is halved,
/// with eval taking the extra row when the remainder is odd.
pub fn split_corpus<T>(rows: Vec<T>, train_fraction: f64, seed: u64) -> Result<CorpusSplit<T>> {
    if rows.is_empty() {
        return Err(invalid("cannot split an empty corpus"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = rows.len();
    let (n_train, n_eval) = split_sizes(n, train_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut slots: Vec<Option<T>> = rows.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter()
            .map(|&i| slots[i].take().expect("each row taken once"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let eval = take(&order[n_train..n_train + n_eval]);
    let test = take(&order[n_train + n_eval..]);
    Ok(CorpusSplit { train, eval, test })
}

/// (train rows, eval rows) for `n` rows; test gets the rest.
pub fn split_sizes(n: usize, train_fraction: f64) -> (usize, usize) {
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(n);
    let rest = n - n_train;
    (n_train, rest.div_ceil(2))
}

/// A padded id matrix with its masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// (rows, context_length)
    pub ids: Array2<u32>,
    /// 1 where the target `ids[r, t + 1]` is a real token or eos.
    pub loss_mask: Array2<u8>,
    /// 1 on every non-pad input position.
    pub valid: Array2<u8>,
    /// UTF-8 bytes covered by the batch.
    pub n_bytes: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn width(&self) -> usize {
        self.ids.ncols()
    }

    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().map(|&m| m as usize).sum()
    }
}

/// Builds rows `bos ++ ids ++ eos ++ pad...`.
pub fn make_batch(
    segments: &[ByteSegment],
    context_length: usize,
    special: SpecialTokens,
) -> Result<Batch> {
    if segments.is_empty() {
        return Err(invalid("cannot build an empty batch"));
    }
    let rows = segments.len();
    let mut ids = Array2::from_elem((rows, context_length), special.pad);
    let mut loss_mask = Array2::zeros((rows, context_length));
    let mut valid = Array2::zeros((rows, context_length));
    let mut n_bytes = 0;
    for (r, seg) in segments.iter().enumerate() {
        let len = seg.ids.len() + 2;
        if len > context_length {
            return Err(Error::SegmentTooLong {
                len,
                context_length,
            });
        }
        ids[[r, 0]] = special.bos;
        for (t, &id) in seg.ids.iter().enumerate() {
            ids[[r, t + 1]] = id;
        }
        ids[[r, len - 1]] = special.eos;
        for t in 0..len {
            valid[[r, t]] = 1;
        }
        // targets at positions 0..len-1 are ids[1..len]: the bytes and eos
        for t in 0..len - 1 {
            loss_mask[[r, t]] = 1;
        }
        n_bytes += seg.byte_len;
    }
    Ok(Batch {
        ids,
        loss_mask,
        valid,
        n_bytes,
    })
}
