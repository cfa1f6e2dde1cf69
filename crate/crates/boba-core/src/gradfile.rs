//! Binary container for one aggregation problem.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "BOBAGRD1"
//! d         u64      gradient dimension
//! n         u64      client count
//! c         u64      class count
//! s         u64      server columns, 0 or c
//! payload   d·(n+s) f64, column by column: clients, then server classes
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::linalg::Matrix;

pub const MAGIC: [u8; 8] = *b"BOBAGRD1";

const HEADER_LEN: usize = 8 + 4 * 8;

#[derive(Debug, Error)]
pub enum GradfileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a gradient file (bad magic bytes)")]
    BadMagic,
    #[error("truncated gradient file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("gradient file has {0} trailing bytes")]
    TrailingBytes(u64),
    #[error("invalid gradient file: {0}")]
    Invalid(String),
}

/// Client gradients, optional server class gradients and the class count.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientFile {
    /// `d × n`.
    pub gradients: Matrix,
    /// `d × c` when present.
    pub server: Option<Matrix>,
    pub classes: usize,
}

impl GradientFile {
    pub fn new(gradients: Matrix, server: Option<Matrix>, classes: usize) -> Result<Self, GradfileError> {
        let file = Self { gradients, server, classes };
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<(), GradfileError> {
        if let Some(s) = &self.server {
            if s.nrows() != self.gradients.nrows() {
                return Err(GradfileError::Invalid(format!(
                    "server dimension {} differs from client dimension {}",
                    s.nrows(),
                    self.gradients.nrows()
                )));
            }
            if s.ncols() != self.classes {
                return Err(GradfileError::Invalid(format!(
                    "{} server columns for {} classes",
                    s.ncols(),
                    self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.gradients.nrows()
    }

    pub fn n(&self) -> usize {
        self.gradients.ncols()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), GradfileError> {
        self.validate()?;
        let s = self.server.as_ref().map_or(0, Matrix::ncols);
        out.write_all(&MAGIC)?;
        for v in [self.dim(), self.n(), self.classes, s] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        let server = self.server.iter().flat_map(|m| m.iter());
        for x in self.gradients.iter().chain(server) {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, GradfileError> {
        let mut header = [0u8; HEADER_LEN];
        let got = read_full(&mut input, &mut header)?;
        if got < MAGIC.len() || header[..8] != MAGIC {
            return Err(GradfileError::BadMagic);
        }
        if got < HEADER_LEN {
            return Err(GradfileError::Invalid("header is truncated".into()));
        }
        let field = |k: usize| u64::from_le_bytes(header[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"));
        let (d, n, c, s) = (field(0), field(1), field(2), field(3));
        if s != 0 && s != c {
            return Err(GradfileError::Invalid(format!("server columns must be 0 or {c}, found {s}")));
        }
        let expected = d
            .checked_mul(n + s)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| GradfileError::Invalid("payload size overflows".into()))?;
        let mut payload = Vec::new();
        input.by_ref().take(expected).read_to_end(&mut payload)?;
        if (payload.len() as u64) < expected {
            return Err(GradfileError::Truncated { expected, found: payload.len() as u64 });
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(GradfileError::TrailingBytes(rest.len() as u64));
        }
        let values: Vec<f64> =
            payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let (d, n, c, s) = (d as usize, n as usize, c as usize, s as usize);
        let gradients = Matrix::from_column_slice(d, n, &values[..d * n]);
        let server = (s > 0).then(|| Matrix::from_column_slice(d, s, &values[d * n..]));
        Self::new(gradients, server, c)
    }

    pub fn load(path: &Path) -> Result<Self, GradfileError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), GradfileError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    /// One CSV line per column: `kind,index,v_1,…,v_d` with kind `client`
    /// or `server`.
    pub fn write_text<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut line = |kind: &str, j: usize, m: &Matrix| -> io::Result<()> {
            write!(out, "{kind},{j}")?;
            for x in m.column(j).iter() {
                write!(out, ",{x}")?;
            }
            writeln!(out)
        };
        for j in 0..self.n() {
            line("client", j, &self.gradients)?;
        }
        if let Some(s) = &self.server {
            for z in 0..s.ncols() {
                line("server", z, s)?;
            }
        }
        Ok(())
    }
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match input.read(&mut buf[got..])? {
            0 => break,
            k => got += k,
        }
    }
    Ok(got)
}
