//! Little-endian primitives shared by the SPST, FEAT and MDLP containers.
//!
//! Containers are `magic(4) | version u32 | body`, followed by a CRC32 of all
//! preceding bytes for SPST and MDLP.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crc32fast::Hasher;

use crate::error::{CodecError, Error, Result};

/// Upper bound on speculative `Vec` capacity taken from untrusted counts.
pub(crate) const MAX_PREALLOC: usize = 4096;

pub(crate) struct CrcWriter<W: Write> {
    inner: W,
    hasher: Hasher,
    written: u64,
}

impl<W: Write> CrcWriter<W> {
    pub fn new(inner: W) -> Self {
        CrcWriter {
            inner,
            hasher: Hasher::new(),
            written: 0,
        }
    }

    pub fn bytes(&mut self, b: &[u8]) -> io::Result<()> {
        self.hasher.update(b);
        self.written += b.len() as u64;
        self.inner.write_all(b)
    }

    pub fn u16(&mut self, v: u16) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    /// Length-prefixed (u16) UTF-8 identifier.
    pub fn id(&mut self, id: &str) -> Result<()> {
        let len = u16::try_from(id.len())
            .map_err(|_| CodecError::Invalid(format!("identifier longer than 65535 bytes: {id:.32}…")))?;
        self.u16(len).map_err(CodecError::Io)?;
        self.bytes(id.as_bytes()).map_err(CodecError::Io)?;
        Ok(())
    }

    /// Flushes without a footer, returning the inner writer and total length.
    pub fn finish_plain(mut self) -> io::Result<(W, u64)> {
        self.inner.flush()?;
        Ok((self.inner, self.written))
    }

    /// Appends the CRC footer and returns the inner writer and total length.
    pub fn finish(mut self) -> io::Result<(W, u64)> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok((self.inner, self.written + 4))
    }
}

pub(crate) struct CrcReader<R: Read> {
    inner: R,
    hasher: Hasher,
}

impl<R: Read> CrcReader<R> {
    pub fn new(inner: R) -> Self {
        CrcReader {
            inner,
            hasher: Hasher::new(),
        }
    }

    fn fill(&mut self, buf: &mut [u8], context: &'static str) -> Result<(), CodecError> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CodecError::Truncated { context },
            _ => CodecError::Io(e),
        })?;
        self.hasher.update(buf);
        Ok(())
    }

    pub fn array<const N: usize>(&mut self, context: &'static str) -> Result<[u8; N], CodecError> {
        let mut b = [0u8; N];
        self.fill(&mut b, context)?;
        Ok(b)
    }

    pub fn u16(&mut self, context: &'static str) -> Result<u16, CodecError> {
        self.array(context).map(u16::from_le_bytes)
    }

    pub fn u32(&mut self, context: &'static str) -> Result<u32, CodecError> {
        self.array(context).map(u32::from_le_bytes)
    }

    pub fn u64(&mut self, context: &'static str) -> Result<u64, CodecError> {
        self.array(context).map(u64::from_le_bytes)
    }

    pub fn f32(&mut self, context: &'static str) -> Result<f32, CodecError> {
        self.array(context).map(f32::from_le_bytes)
    }

    pub fn f64(&mut self, context: &'static str) -> Result<f64, CodecError> {
        self.array(context).map(f64::from_le_bytes)
    }

    pub fn vec(&mut self, len: usize, context: &'static str) -> Result<Vec<u8>, CodecError> {
        let mut out = Vec::with_capacity(len.min(1 << 20));
        let got = (&mut self.inner)
            .take(len as u64)
            .read_to_end(&mut out)
            .map_err(CodecError::Io)?;
        if got != len {
            return Err(CodecError::Truncated { context });
        }
        self.hasher.update(&out);
        Ok(out)
    }

    pub fn id(&mut self, context: &'static str) -> Result<String, CodecError> {
        let len = self.u16(context)? as usize;
        let bytes = self.vec(len, context)?;
        String::from_utf8(bytes).map_err(|_| CodecError::Invalid(format!("{context}: identifier is not UTF-8")))
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<(), CodecError> {
        let found = self.array::<4>("magic")?;
        if &found != magic {
            return Err(CodecError::BadMagic {
                expected: *magic,
                found,
            });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(CodecError::UnsupportedVersion {
                expected: version,
                found: v,
            });
        }
        Ok(())
    }

    /// For formats without a footer: checks that the input is exhausted.
    pub fn finish_plain(mut self) -> Result<(), CodecError> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra).map_err(CodecError::Io)? {
            0 => Ok(()),
            _ => Err(CodecError::TrailingData),
        }
    }

    /// Checks the CRC footer and that nothing follows it.
    pub fn finish(mut self) -> Result<(), CodecError> {
        let computed = self.hasher.clone().finalize();
        let mut footer = [0u8; 4];
        self.inner.read_exact(&mut footer).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CodecError::Truncated { context: "CRC footer" },
            _ => CodecError::Io(e),
        })?;
        let stored = u32::from_le_bytes(footer);
        if stored != computed {
            return Err(CodecError::CrcMismatch { stored, computed });
        }
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra).map_err(CodecError::Io)? {
            0 => Ok(()),
            _ => Err(CodecError::TrailingData),
        }
    }
}

pub(crate) fn open_reader(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

/// Writes a file through a temporary sibling and renames it into place, so a
/// reader never observes a partially written file.
pub(crate) fn write_atomically<T>(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> Result<T>,
) -> Result<T> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| Error::io(format!("creating temporary file in {}", dir.display()), e))?;
    let out = {
        let mut w = BufWriter::new(&mut tmp);
        let out = body(&mut w)?;
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        out
    };
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(format!("syncing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(out)
}
