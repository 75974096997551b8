//! On-disk formats for corpora, segment shards and BPE vocabularies.
//!
//! Segment shard (little-endian):
//!
//! ```text
//! magic   8 bytes  "SYNSEG\0\0"
//! version u32      = 1
//! count   u64      number of segments
//! per segment:
//!   byte_len u32
//!   n_ids    u32
//!   ids      n_ids x u32
//! ```
//!
//! BPE vocabulary (little-endian):
//!
//! ```text
//! magic    8 bytes "SYNBPE\0\0"
//! version  u32     = 1
//! n_merges u32
//! merges   n_merges x (u32 left, u32 right)
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{BpeVocab, ByteSegment};

pub const SEGMENT_MAGIC: &[u8; 8] = b"SYNSEG\0\0";
pub const SEGMENT_VERSION: u32 = 1;
pub const VOCAB_MAGIC: &[u8; 8] = b"SYNBPE\0\0";
pub const VOCAB_VERSION: u32 = 1;

#[derive(Deserialize)]
struct JsonRow {
    text: String,
}

/// Reads documents from a `.jsonl` file (one `{"text": ...}` object per
/// line) or a plain-text file, where blank lines separate documents.
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let raw = fs::read(path)?;
    let text = std::str::from_utf8(&raw)?;
    let is_jsonl = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    if is_jsonl {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str::<JsonRow>(l)?.text))
            .collect()
    } else {
        Ok(text
            .split("\n\n")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(str::to_owned)
            .collect())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Format("bad magic".into()));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

pub fn write_segment_shard(path: &Path, segments: &[ByteSegment]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SEGMENT_MAGIC)?;
    w.write_all(&SEGMENT_VERSION.to_le_bytes())?;
    w.write_all(&(segments.len() as u64).to_le_bytes())?;
    for s in segments {
        w.write_all(&(s.byte_len as u32).to_le_bytes())?;
        w.write_all(&(s.ids.len() as u32).to_le_bytes())?;
        for id in &s.ids {
            w.write_all(&id.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_segment_shard(path: &Path) -> Result<Vec<ByteSegment>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    r.header(SEGMENT_MAGIC, SEGMENT_VERSION)?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let byte_len = r.u32()? as usize;
        let n = r.u32()? as usize;
        let ids = r
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(ByteSegment { ids, byte_len });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_vocab(path: &Path, vocab: &BpeVocab) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(VOCAB_MAGIC)?;
    w.write_all(&VOCAB_VERSION.to_le_bytes())?;
    w.write_all(&(vocab.merges.len() as u32).to_le_bytes())?;
    for &(a, b) in &vocab.merges {
        w.write_all(&a.to_le_bytes())?;
        w.write_all(&b.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<BpeVocab> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    r.header(VOCAB_MAGIC, VOCAB_VERSION)?;
    let n = r.u32()? as usize;
    let mut merges = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        merges.push((r.u32()?, r.u32()?));
    }
    r.finish()?;
    BpeVocab::from_merges(merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bpe_train;

    #[test]
    fn shard_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        let segs = vec![ByteSegment::from_bytes(b"hello"), ByteSegment::from_bytes(b"")];
        write_segment_shard(&p, &segs).unwrap();
        assert_eq!(read_segment_shard(&p).unwrap(), segs);
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[..8], SEGMENT_MAGIC);
        assert_eq!(raw.len(), 8 + 4 + 8 + (8 + 20) + 8);
    }

    #[test]
    fn vocab_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        let v = bpe_train(b"banana bandana", 262).unwrap();
        write_vocab(&p, &v).unwrap();
        assert_eq!(read_vocab(&p).unwrap(), v);

        let mut raw = fs::read(&p).unwrap();
        raw.truncate(raw.len() - 1);
        fs::write(&p, &raw).unwrap();
        assert!(matches!(read_vocab(&p), Err(Error::Format(_))));
        fs::write(&p, b"NOTMAGIC\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_vocab(&p), Err(Error::Format(_))));
    }

    #[test]
    fn documents_from_txt_and_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("a.txt");
        fs::write(&txt, "first doc\nline two\n\n\nsecond doc\n").unwrap();
        assert_eq!(
            read_documents(&txt).unwrap(),
            vec!["first doc\nline two".to_string(), "second doc".to_string()]
        );
        let jl = dir.path().join("a.jsonl");
        fs::write(&jl, "{\"text\": \"one\", \"id\": 3}\n\n{\"text\": \"two\"}\n").unwrap();
        assert_eq!(read_documents(&jl).unwrap(), vec!["one", "two"]);
    }
}
