//! File plumbing shared by the binary formats: atomic writes, a bounds-checked
//! little-endian reader, the `SDDMAT1` matrix dump, CSV export and the FNV-1a
//! content fingerprint.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Result, SddError};
use crate::numerics::Matrix;

pub const MATRIX_MAGIC: &[u8; 8] = b"SDDMAT1\0";

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| SddError::Io(e.error))?;
    Ok(())
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fingerprint of a matrix: FNV-1a over `u64 rows, u64 cols` then the
/// row-major values, all little-endian.
pub fn matrix_fingerprint(m: &Matrix) -> u64 {
    let mut buf = Vec::with_capacity(16 + 8 * m.as_slice().len());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&buf)
}

/// Cursor over an in-memory file; every failure names the byte offset.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(SddError::format(
                self.offset(),
                format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// `rows × cols` little-endian f64 values, rejecting non-finite entries.
    pub(crate) fn matrix_le(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| SddError::format(self.offset(), format!("{what} dimensions overflow")))?;
        let start = self.offset();
        let bytes = self.take(len, what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for (k, chunk) in bytes.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(SddError::format(start + 8 * k as u64, format!("non-finite value in {what}")));
            }
            data.push(v);
        }
        Matrix::new(rows, cols, data)
    }

    pub(crate) fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(SddError::format(
                self.offset(),
                format!("{} trailing bytes after {what}", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub(crate) fn push_matrix_le(out: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    out.extend_from_slice(&dim_u32(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dim_u32(m.cols())?.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub(crate) fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| SddError::arg(format!("dimension {n} does not fit in u32")))
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * m.as_slice().len());
    out.extend_from_slice(MATRIX_MAGIC);
    push_matrix_le(&mut out, m)?;
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(8, "magic")?;
    if magic != MATRIX_MAGIC {
        return Err(SddError::format(0, "not an SDDMAT1 matrix file"));
    }
    let rows = r.u32_le("row count")? as usize;
    let cols = r.u32_le("column count")? as usize;
    let m = r.matrix_le(rows, cols, "matrix values")?;
    r.finish("matrix")?;
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_matrix(m)?)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&std::fs::read(path)?)
}

/// Headerless numeric CSV using the shortest round-trip float formatting.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for row in m.row_iter() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}
