//! Little-endian helpers shared by every binary file format.
//!
//! All formats start with a four-byte magic followed by a `u32` version.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FORMAT_VERSION: u32 = 1;

pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        BinWriter { inner }
    }

    pub fn header(&mut self, magic: &[u8; 4]) -> std::io::Result<()> {
        self.inner.write_all(magic)?;
        self.u32(FORMAT_VERSION)
    }

    pub fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_u32::<LittleEndian>(v)
    }

    pub fn usize(&mut self, v: usize) -> std::io::Result<()> {
        let v =
            u32::try_from(v).map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "count exceeds u32"))?;
        self.u32(v)
    }

    pub fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_f64::<LittleEndian>(v)
    }

    pub fn f64s(&mut self, vs: &[f64]) -> std::io::Result<()> {
        vs.iter().try_for_each(|&v| self.f64(v))
    }

    pub fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(b)
    }

    pub fn string(&mut self, s: &str) -> std::io::Result<()> {
        self.usize(s.len())?;
        self.inner.write_all(s.as_bytes())
    }

    /// Writes `rows`, `cols` and the row-major payload.
    pub fn matrix(&mut self, m: &Matrix) -> std::io::Result<()> {
        self.usize(m.rows())?;
        self.usize(m.cols())?;
        self.f64s(m.as_slice())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        BinReader { inner }
    }

    /// Checks the magic and version; returns an error message on mismatch.
    pub fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        let mut got = [0u8; 4];
        self.inner.read_exact(&mut got).map_err(|e| format!("reading magic: {e}"))?;
        if &got != magic {
            return Err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            ));
        }
        let version = self.u32().map_err(|e| format!("reading version: {e}"))?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> std::io::Result<u32> {
        self.inner.read_u32::<LittleEndian>()
    }

    pub fn usize(&mut self) -> std::io::Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> std::io::Result<f64> {
        self.inner.read_f64::<LittleEndian>()
    }

    pub fn f64s(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn bytes(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn string(&mut self) -> std::io::Result<String> {
        let n = self.usize()?;
        let buf = self.bytes(n)?;
        String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn matrix(&mut self) -> std::io::Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let data = self.f64s(rows * cols)?;
        Matrix::from_vec(rows, cols, data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    /// Succeeds only if the stream is exhausted.
    pub fn expect_eof(&mut self) -> std::io::Result<()> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one)? {
            0 => Ok(()),
            _ => Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "trailing bytes after payload")),
        }
    }
}

/// Serializes a value into a byte buffer with the given writer closure.
pub fn to_bytes(f: impl FnOnce(&mut BinWriter<&mut Vec<u8>>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut w = BinWriter::new(&mut buf);
    // writing into a Vec cannot fail
    f(&mut w).expect("in-memory write");
    buf
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// The four-byte magic at the start of a file, if it has one.
pub fn sniff_magic(path: &std::path::Path) -> Result<[u8; 4]> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(|_| Error::format(path, "file too short to carry a magic"))?;
    Ok(magic)
}
