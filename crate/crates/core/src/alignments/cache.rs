//! "SPST" v1 soft-alignment cache.
//!
//! Little-endian layout:
//!
//! ```text
//! header   "SPST" | version u32 | utterance_count u64
//! utterance id_len u16 | id (UTF-8) | frame_count u32
//! frame    entry_count u32 | entry_count × (state_id u32, prob f32)
//! footer   CRC32 of every preceding byte
//! ```
//!
//! Size is `16 + Σ_u (2 + id_len_u + 4) + 4·frames + 8·entries + 4`.

use std::io::{Read, Write};
use std::path::Path;

use super::{SoftAlignment, SparsePosterior};
use crate::codec::{open_reader, write_atomically, CrcReader, CrcWriter, MAX_PREALLOC};
use crate::error::{CodecError, Result};

pub const MAGIC: &[u8; 4] = b"SPST";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub utterances: u64,
    pub frames: u64,
    pub entries: u64,
    pub bytes: u64,
}

impl CacheStats {
    pub fn mean_entries_per_frame(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.entries as f64 / self.frames as f64
        }
    }

    /// Expected file length for these counts plus the total identifier bytes.
    pub fn expected_bytes(utterances: u64, id_bytes: u64, frames: u64, entries: u64) -> u64 {
        16 + utterances * 6 + id_bytes + frames * 4 + entries * 8 + 4
    }
}

/// Encodes `alignments` into `w`.
pub fn write_cache_to<W: Write>(alignments: &[SoftAlignment], w: W) -> Result<(W, CacheStats)> {
    let io = CodecError::Io;
    let mut out = CrcWriter::new(w);
    out.bytes(MAGIC).map_err(io)?;
    out.u32(VERSION).map_err(io)?;
    out.u64(alignments.len() as u64).map_err(io)?;
    let mut stats = CacheStats {
        utterances: alignments.len() as u64,
        ..CacheStats::default()
    };
    for a in alignments {
        out.id(&a.id)?;
        let frames = u32::try_from(a.frames.len())
            .map_err(|_| CodecError::Invalid(format!("{}: too many frames", a.id)))?;
        out.u32(frames).map_err(io)?;
        for f in &a.frames {
            out.u32(f.len() as u32).map_err(io)?;
            for &(s, p) in f.entries() {
                out.u32(s).map_err(io)?;
                out.f32(p).map_err(io)?;
            }
            stats.entries += f.len() as u64;
        }
        stats.frames += a.frames.len() as u64;
    }
    let (w, bytes) = out.finish().map_err(io)?;
    stats.bytes = bytes;
    Ok((w, stats))
}

/// Writes the cache atomically (temporary file, then rename).
pub fn write_cache(alignments: &[SoftAlignment], path: &Path) -> Result<CacheStats> {
    write_atomically(path, |w| write_cache_to(alignments, w).map(|(_, s)| s))
}

/// Streaming decoder: yields one utterance at a time and verifies the CRC
/// after the last one.
pub struct CacheReader<R: Read> {
    inner: Option<CrcReader<R>>,
    remaining: u64,
    utterances: u64,
}

impl<R: Read> CacheReader<R> {
    pub fn new(reader: R) -> Result<Self, CodecError> {
        let mut inner = CrcReader::new(reader);
        inner.header(MAGIC, VERSION)?;
        let utterances = inner.u64("utterance count")?;
        Ok(CacheReader {
            inner: Some(inner),
            remaining: utterances,
            utterances,
        })
    }

    /// Utterance count declared in the header.
    pub fn utterances(&self) -> u64 {
        self.utterances
    }

    fn read_utterance(r: &mut CrcReader<R>) -> Result<SoftAlignment, CodecError> {
        let id = r.id("utterance id")?;
        let frame_count = r.u32("frame count")? as usize;
        let mut frames = Vec::with_capacity(frame_count.min(MAX_PREALLOC));
        for _ in 0..frame_count {
            let n = r.u32("entry count")? as usize;
            if n == 0 {
                return Err(CodecError::Invalid(format!("{id}: frame with no entries")));
            }
            let mut entries = Vec::with_capacity(n.min(MAX_PREALLOC));
            for _ in 0..n {
                let s = r.u32("state id")?;
                let p = r.f32("probability")?;
                entries.push((s, p));
            }
            let post = SparsePosterior::new(entries)
                .map_err(|e| CodecError::Invalid(format!("{id}: {e}")))?;
            frames.push(post);
        }
        Ok(SoftAlignment {
            id,
            frames,
            threshold: None,
        })
    }
}

impl<R: Read> Iterator for CacheReader<R> {
    type Item = Result<SoftAlignment, CodecError>;

    fn next(&mut self) -> Option<Self::Item> {
        let r = self.inner.as_mut()?;
        if self.remaining == 0 {
            let r = self.inner.take()?;
            return r.finish().err().map(Err);
        }
        self.remaining -= 1;
        match Self::read_utterance(r) {
            Ok(a) => Some(Ok(a)),
            Err(e) => {
                self.inner = None;
                Some(Err(e))
            }
        }
    }
}

pub fn read_cache_from<R: Read>(reader: R) -> Result<Vec<SoftAlignment>> {
    let r = CacheReader::new(reader)?;
    let mut out = Vec::with_capacity((r.utterances() as usize).min(MAX_PREALLOC));
    for a in r {
        out.push(a?);
    }
    Ok(out)
}

pub fn read_cache(path: &Path) -> Result<Vec<SoftAlignment>> {
    read_cache_from(open_reader(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> Vec<SoftAlignment> {
        let frame = |e: Vec<(u32, f32)>| SparsePosterior::new(e).unwrap();
        vec![
            SoftAlignment {
                id: "a".into(),
                frames: vec![
                    frame(vec![(3, 1.0)]),
                    frame(vec![(0, 0.75), (7, 0.25)]),
                    frame(vec![(1, 0.5), (2, 0.3), (4, 0.2)]),
                ],
                threshold: None,
            },
            SoftAlignment {
                id: "utt-β".into(),
                frames: vec![
                    frame(vec![(9, 0.6), (8, 0.4)]),
                    frame(vec![(2, 1.0)]),
                    frame(vec![(5, 0.875), (6, 0.125)]),
                ],
                threshold: None,
            },
        ]
    }

    #[test]
    fn empty_round_trip() {
        let (bytes, stats) = write_cache_to(&[], Vec::new()).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(stats.bytes, 20);
        assert!(read_cache_from(bytes.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn two_utterances_round_trip_and_size() {
        let data = sample();
        let (bytes, stats) = write_cache_to(&data, Vec::new()).unwrap();
        assert_eq!(read_cache_from(bytes.as_slice()).unwrap(), data);
        let id_bytes: u64 = data.iter().map(|a| a.id.len() as u64).sum();
        let expect = 16 + (2 + 1 + 4) + (2 + id_bytes - 1 + 4) + 6 * 4 + 11 * 8 + 4;
        assert_eq!(stats.entries, 11);
        assert_eq!(bytes.len() as u64, expect);
        assert_eq!(
            CacheStats::expected_bytes(2, id_bytes, 6, 11),
            bytes.len() as u64
        );
    }

    #[test]
    fn distinct_error_codes() {
        let (bytes, _) = write_cache_to(&sample(), Vec::new()).unwrap();
        let code = |b: &[u8]| match read_cache_from(b) {
            Err(Error::Codec(c)) => c.code(),
            other => panic!("expected codec error, got {other:?}"),
        };
        let mut magic = bytes.clone();
        magic[0] = b'X';
        let mut version = bytes.clone();
        version[4] = 2;
        let mut crc = bytes.clone();
        let n = crc.len();
        crc[n - 1] ^= 0xff;
        let mut trailing = bytes.clone();
        trailing.push(0);
        let codes = [
            code(&magic),
            code(&version),
            code(&bytes[..bytes.len() - 3]),
            code(&crc),
            code(&trailing),
        ];
        assert_eq!(codes, [1, 2, 3, 4, 6]);
    }

    #[test]
    fn streaming_reader_yields_in_order() {
        let data = sample();
        let (bytes, _) = write_cache_to(&data, Vec::new()).unwrap();
        let ids: Vec<String> = CacheReader::new(bytes.as_slice())
            .unwrap()
            .map(|a| a.unwrap().id)
            .collect();
        assert_eq!(ids, vec!["a", "utt-β"]);
    }
}
