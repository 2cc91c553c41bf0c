//! On-disk formats owned by the driver: the `NMFM` model file, dataset
//! loading with format sniffing, and the text export.
//!
//! Model layout, little-endian: `b"NMFM"`, u32 version, u64 m, u64 n, u64 k,
//! then W (m·k f64, row-major) and H (n·k f64, row-major).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nomad_core::data::{parse_text, read_binary_from, IndexBase};
use nomad_core::{DatasetMeta, FactorMatrix, Rating, Real};

const MODEL_MAGIC: &[u8; 4] = b"NMFM";
const MODEL_VERSION: u32 = 1;
const DATA_MAGIC: &[u8; 4] = b"NMDB";

// `Real` is f32 under the single-precision feature.
#[allow(clippy::unnecessary_cast)]
pub fn write_model_to<W: Write>(mut out: W, w: &FactorMatrix, h: &FactorMatrix) -> Result<()> {
    if w.k() != h.k() {
        bail!("W has rank {} but H has rank {}", w.k(), h.k());
    }
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    for v in [w.rows(), h.rows(), w.k()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for &x in w.as_slice().iter().chain(h.as_slice()) {
        out.write_all(&(x as f64).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_model(path: &Path, w: &FactorMatrix, h: &FactorMatrix) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_model_to(BufWriter::new(file), w, h).with_context(|| format!("writing {}", path.display()))
}

pub fn read_model_from<R: Read>(mut input: R) -> Result<(FactorMatrix, FactorMatrix)> {
    let mut head = [0u8; 32];
    input.read_exact(&mut head).context("model header truncated")?;
    if &head[0..4] != MODEL_MAGIC {
        bail!("not a model file (bad magic)");
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        bail!("unsupported model version {version}");
    }
    let dim = |at: usize| u64::from_le_bytes(head[at..at + 8].try_into().unwrap());
    let (m, n, k) = (dim(8), dim(16), dim(24));
    // Guard the allocation against corrupt headers.
    let values = m
        .checked_add(n)
        .and_then(|r| r.checked_mul(k))
        .filter(|&v| v <= (1 << 36))
        .with_context(|| format!("implausible model shape {m}x{n}x{k}"))? as usize;
    let mut bytes = vec![0u8; values * 8];
    input.read_exact(&mut bytes).context("model body truncated")?;
    if input.read(&mut [0u8; 1])? != 0 {
        bail!("trailing bytes after model body");
    }
    let mut all: Vec<Real> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
        .collect();
    let h_vals = all.split_off(m as usize * k as usize);
    Ok((
        FactorMatrix::from_vec(m as usize, k as usize, all)?,
        FactorMatrix::from_vec(n as usize, k as usize, h_vals)?,
    ))
}

pub fn read_model(path: &Path) -> Result<(FactorMatrix, FactorMatrix)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_model_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// Loads a binary dataset, or parses text when the magic is absent.
pub fn load_ratings(path: &Path, one_based: bool) -> Result<(DatasetMeta, Vec<Rating>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let binary = reader.fill_buf()?.starts_with(DATA_MAGIC);
    let loaded = if binary {
        read_binary_from(reader, &name)
    } else {
        let base = if one_based { IndexBase::One } else { IndexBase::Zero };
        parse_text(reader, base, &name)
    };
    loaded.with_context(|| format!("loading {}", path.display()))
}

/// Zero-based `user item rating` text with a `%%meta` header.
pub fn write_text(path: &Path, meta: &DatasetMeta, entries: &[Rating]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "%%meta {} {} {}", meta.m, meta.n, entries.len())?;
    for r in entries {
        writeln!(out, "{} {} {}", r.user, r.item, r.value)?;
    }
    out.flush()?;
    Ok(())
}
