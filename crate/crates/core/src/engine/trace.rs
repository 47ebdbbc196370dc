//! Memory reference traces.
//!
//! Binary layout: the 8-byte magic `SPTRACE1`, then 17-byte little-endian
//! records `thread:u16 asid:u16 vaddr:u64 flags:u8 insns_since_prev:u32`.
//! Flag bit 0 marks a write; the other bits are reserved and must be zero.
//!
//! The text form holds one record per line, `thread asid vaddr r|w insns`,
//! with the address in hex and `#` starting a comment.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::addrspace::{Asid, VirtualAddress};

pub const MAGIC: &[u8; 8] = b"SPTRACE1";
pub const RECORD_BYTES: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub thread: u16,
    pub asid: Asid,
    pub vaddr: VirtualAddress,
    pub is_write: bool,
    /// Non-memory instructions executed since this thread's previous reference.
    pub insns_since_prev: u32,
}

impl TraceRecord {
    pub fn read(thread: u16, asid: Asid, vaddr: VirtualAddress) -> Self {
        Self { thread, asid, vaddr, is_write: false, insns_since_prev: 0 }
    }

    pub fn to_bytes(&self) -> [u8; RECORD_BYTES] {
        let mut b = [0u8; RECORD_BYTES];
        b[0..2].copy_from_slice(&self.thread.to_le_bytes());
        b[2..4].copy_from_slice(&self.asid.get().to_le_bytes());
        b[4..12].copy_from_slice(&self.vaddr.get().to_le_bytes());
        b[12] = u8::from(self.is_write);
        b[13..17].copy_from_slice(&self.insns_since_prev.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; RECORD_BYTES], index: u64) -> Result<Self, TraceError> {
        let bad = |reason: String| TraceError::Malformed { index, reason };
        let thread = u16::from_le_bytes([b[0], b[1]]);
        let asid = u16::from_le_bytes([b[2], b[3]]);
        let asid = Asid::new(asid as u32).map_err(|e| bad(e.to_string()))?;
        let vaddr = u64::from_le_bytes(b[4..12].try_into().unwrap());
        let vaddr = VirtualAddress::new(vaddr).map_err(|e| bad(e.to_string()))?;
        if b[12] & !1 != 0 {
            return Err(bad(format!("reserved flag bits set: {:#04x}", b[12])));
        }
        let insns_since_prev = u32::from_le_bytes(b[13..17].try_into().unwrap());
        Ok(Self { thread, asid, vaddr, is_write: b[12] & 1 == 1, insns_since_prev })
    }

    pub fn to_text(&self) -> String {
        let rw = if self.is_write { 'w' } else { 'r' };
        format!("{} {} {:#x} {rw} {}", self.thread, self.asid, self.vaddr.get(), self.insns_since_prev)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("i/o error: {0}")]
    Stream(#[from] io::Error),
    #[error("not a trace file: bad magic header")]
    BadMagic,
    #[error("record {index}: truncated")]
    Truncated { index: u64 },
    #[error("record {index}: {reason}")]
    Malformed { index: u64, reason: String },
}

pub struct TraceWriter<W: Write> {
    out: W,
    written: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self, TraceError> {
        out.write_all(MAGIC)?;
        Ok(Self { out, written: 0 })
    }

    pub fn write(&mut self, r: &TraceRecord) -> Result<(), TraceError> {
        self.out.write_all(&r.to_bytes())?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn finish(mut self) -> Result<W, TraceError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_binary<W: Write>(out: W, records: &[TraceRecord]) -> Result<(), TraceError> {
    let mut w = TraceWriter::new(out)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn write_file(path: &Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    let io = |source| TraceError::Io { path: path.to_path_buf(), source };
    let f = File::create(path).map_err(io)?;
    write_binary(BufWriter::new(f), records).map_err(|e| match e {
        TraceError::Stream(source) => io(source),
        other => other,
    })
}

/// Streaming reader over a binary trace.
pub struct TraceReader<R: Read> {
    input: R,
    index: u64,
    len_hint: Option<u64>,
    done: bool,
}

impl<R: Read> TraceReader<R> {
    pub fn new(mut input: R) -> Result<Self, TraceError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| TraceError::BadMagic)?;
        if &magic != MAGIC {
            return Err(TraceError::BadMagic);
        }
        Ok(Self { input, index: 0, len_hint: None, done: false })
    }

    /// Records in the trace, when known from the file size.
    pub fn len_hint(&self) -> Option<u64> {
        self.len_hint
    }
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, TraceError> {
        let io = |source| TraceError::Io { path: path.to_path_buf(), source };
        let f = File::open(path).map_err(io)?;
        let bytes = f.metadata().map_err(io)?.len();
        let mut r = Self::new(BufReader::with_capacity(1 << 20, f))?;
        r.len_hint = Some(bytes.saturating_sub(MAGIC.len() as u64) / RECORD_BYTES as u64);
        Ok(r)
    }
}

impl<R: Read> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut buf = [0u8; RECORD_BYTES];
        let mut filled = 0;
        while filled < RECORD_BYTES {
            match self.input.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        if filled == 0 {
            self.done = true;
            return None;
        }
        let index = self.index;
        self.index += 1;
        if filled < RECORD_BYTES {
            self.done = true;
            return Some(Err(TraceError::Truncated { index }));
        }
        let r = TraceRecord::from_bytes(&buf, index);
        if r.is_err() {
            self.done = true;
        }
        Some(r)
    }
}

pub fn read_binary<R: Read>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    TraceReader::new(input)?.collect()
}

pub fn read_file(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    TraceReader::open(path)?.collect()
}

pub fn parse_text_line(line: &str, index: u64) -> Result<Option<TraceRecord>, TraceError> {
    let bad = |reason: String| TraceError::Malformed { index, reason };
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(bad(format!("expected 5 fields, found {}", fields.len())));
    }
    let thread = fields[0].parse::<u16>().map_err(|e| bad(format!("thread: {e}")))?;
    let asid = fields[1].parse::<u32>().map_err(|e| bad(format!("asid: {e}")))?;
    let asid = Asid::new(asid).map_err(|e| bad(e.to_string()))?;
    let hex = fields[2].trim_start_matches("0x").trim_start_matches("0X");
    let vaddr = u64::from_str_radix(hex, 16).map_err(|e| bad(format!("vaddr: {e}")))?;
    let vaddr = VirtualAddress::new(vaddr).map_err(|e| bad(e.to_string()))?;
    let is_write = match fields[3] {
        "r" | "R" => false,
        "w" | "W" => true,
        other => return Err(bad(format!("access kind {other:?} is neither r nor w"))),
    };
    let insns_since_prev = fields[4].parse::<u32>().map_err(|e| bad(format!("insns: {e}")))?;
    Ok(Some(TraceRecord { thread, asid, vaddr, is_write, insns_since_prev }))
}

pub fn read_text<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if let Some(r) = parse_text_line(&line, out.len() as u64)? {
            out.push(r);
        }
    }
    Ok(out)
}

pub fn write_text<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<(), TraceError> {
    for r in records {
        writeln!(out, "{}", r.to_text())?;
    }
    Ok(())
}

/// Round-robin merge taking `chunk` records from each source in turn.
/// Exhausted sources drop out; per-source order is preserved.
pub fn interleave(sources: Vec<Vec<TraceRecord>>, chunk: usize) -> Vec<TraceRecord> {
    let chunk = chunk.max(1);
    let total = sources.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(total);
    let mut pos = vec![0usize; sources.len()];
    while out.len() < total {
        for (s, p) in sources.iter().zip(pos.iter_mut()) {
            let end = (*p + chunk).min(s.len());
            out.extend_from_slice(&s[*p..end]);
            *p = end;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(thread: u16, asid: u32, vaddr: u64, w: bool, insns: u32) -> TraceRecord {
        TraceRecord {
            thread,
            asid: Asid::new(asid).unwrap(),
            vaddr: VirtualAddress::new(vaddr).unwrap(),
            is_write: w,
            insns_since_prev: insns,
        }
    }

    #[test]
    fn binary_layout() {
        let r = rec(0x0102, 0x0304, 0x0000_0506_0708_090a, true, 0x0b0c0d0e);
        let b = r.to_bytes();
        assert_eq!(b, [2, 1, 4, 3, 0x0a, 9, 8, 7, 6, 5, 0, 0, 1, 0x0e, 0x0d, 0x0c, 0x0b]);
        assert_eq!(TraceRecord::from_bytes(&b, 0).unwrap(), r);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_binary(&b"NOTATRACE"[..]), Err(TraceError::BadMagic)));
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&rec(0, 1, 64, false, 0).to_bytes());
        bytes.extend_from_slice(&[0u8; 5]);
        assert!(matches!(read_binary(&bytes[..]), Err(TraceError::Truncated { index: 1 })));
        let mut bad = rec(0, 1, 64, false, 0).to_bytes();
        bad[11] = 0xff;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&bad);
        assert!(matches!(read_binary(&bytes[..]), Err(TraceError::Malformed { index: 0, .. })));
        let mut flags = rec(0, 1, 64, false, 0).to_bytes();
        flags[12] = 2;
        assert!(TraceRecord::from_bytes(&flags, 3).is_err());
    }

    #[test]
    fn text_format() {
        let text = "# header\n0 1 0x1000 r 4\n\n3 2 2040 w 0  # trailing\n";
        let recs = read_text(text.as_bytes()).unwrap();
        assert_eq!(recs, vec![rec(0, 1, 0x1000, false, 4), rec(3, 2, 0x2040, true, 0)]);
        let mut out = Vec::new();
        write_text(&mut out, &recs).unwrap();
        assert_eq!(read_text(&out[..]).unwrap(), recs);
        assert!(matches!(read_text("0 1 zz r 0".as_bytes()), Err(TraceError::Malformed { index: 0, .. })));
        assert!(read_text("0 1 0x10 x 0".as_bytes()).is_err());
    }

    #[test]
    fn file_round_trip_reports_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let recs: Vec<_> = (0..100).map(|i| rec(i % 3, 1, i as u64 * 4096, i % 2 == 0, 3)).collect();
        write_file(&path, &recs).unwrap();
        let reader = TraceReader::open(&path).unwrap();
        assert_eq!(reader.len_hint(), Some(100));
        assert_eq!(read_file(&path).unwrap(), recs);
        let missing = dir.path().join("missing.bin");
        let err = read_file(&missing).unwrap_err();
        assert!(err.to_string().contains("missing.bin"));
    }

    #[test]
    fn interleave_examples() {
        let a: Vec<_> = (0..3).map(|i| rec(0, 1, i * 64, false, 0)).collect();
        let b: Vec<_> = (0..3).map(|i| rec(1, 2, i * 64, false, 0)).collect();
        assert_eq!(interleave(vec![a.clone()], 1), a);
        let merged = interleave(vec![a.clone(), b.clone()], 1);
        let threads: Vec<u16> = merged.iter().map(|r| r.thread).collect();
        assert_eq!(threads, vec![0, 1, 0, 1, 0, 1]);
        let chunked = interleave(vec![a, b], 2);
        let threads: Vec<u16> = chunked.iter().map(|r| r.thread).collect();
        assert_eq!(threads, vec![0, 0, 1, 1, 0, 1]);
    }

    proptest! {
        #[test]
        fn binary_round_trip(
            recs in proptest::collection::vec(
                (any::<u16>(), 0u32..4096, 0u64..1 << 48, any::<bool>(), any::<u32>()), 0..200)
        ) {
            let recs: Vec<_> = recs.into_iter().map(|(t, a, v, w, i)| rec(t, a, v, w, i)).collect();
            let mut buf = Vec::new();
            write_binary(&mut buf, &recs).unwrap();
            prop_assert_eq!(buf.len(), 8 + 17 * recs.len());
            prop_assert_eq!(read_binary(&buf[..]).unwrap(), recs);
        }

        #[test]
        fn interleave_preserves_per_source_order(
            lens in proptest::collection::vec(0usize..20, 1..6), chunk in 1usize..5
        ) {
            let sources: Vec<Vec<TraceRecord>> = lens
                .iter()
                .enumerate()
                .map(|(t, &n)| (0..n).map(|i| rec(t as u16, 1, i as u64, false, 0)).collect())
                .collect();
            let merged = interleave(sources.clone(), chunk);
            prop_assert_eq!(merged.len(), lens.iter().sum::<usize>());
            for (t, s) in sources.iter().enumerate() {
                let mine: Vec<_> = merged.iter().filter(|r| r.thread == t as u16).copied().collect();
                prop_assert_eq!(&mine, s);
            }
        }
    }
}
