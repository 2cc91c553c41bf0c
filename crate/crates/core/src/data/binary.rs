//! `NMDB` binary dataset format, little-endian:
//! magic, u32 version, u64 m, u64 n, u64 nnz, then nnz x (u32 i, u32 j, f64 value).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DatasetMeta, Rating, SourceFormat};
use crate::error::{Error, Result};
use crate::Real;

const MAGIC: &[u8; 4] = b"NMDB";
const VERSION: u32 = 1;
const RECORD_LEN: usize = 16;

pub fn write_binary_to<W: Write>(mut out: W, meta: &DatasetMeta, entries: &[Rating]) -> Result<()> {
    if meta.nnz != entries.len() as u64 {
        return Err(Error::Format(format!(
            "meta declares {} entries but {} were given",
            meta.nnz,
            entries.len()
        )));
    }
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&meta.m.to_le_bytes())?;
    out.write_all(&meta.n.to_le_bytes())?;
    out.write_all(&meta.nnz.to_le_bytes())?;
    for r in entries {
        out.write_all(&r.user.to_le_bytes())?;
        out.write_all(&r.item.to_le_bytes())?;
        out.write_all(&(r.value as f64).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_binary(path: impl AsRef<Path>, meta: &DatasetMeta, entries: &[Rating]) -> Result<()> {
    write_binary_to(BufWriter::new(File::create(path)?), meta, entries)
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

pub fn read_binary_from<R: Read>(mut input: R, name: &str) -> Result<(DatasetMeta, Vec<Rating>)> {
    let mut header = [0u8; 32];
    read_exact_or(&mut input, &mut header, "header")?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not an NMDB file".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let m = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let n = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let nnz = u64::from_le_bytes(header[24..32].try_into().unwrap());

    let mut entries = Vec::with_capacity(nnz.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD_LEN];
    for idx in 0..nnz {
        read_exact_or(&mut input, &mut rec, &format!("record {idx} of {nnz}"))?;
        let user = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let item = u32::from_le_bytes(rec[4..8].try_into().unwrap());
        let value = f64::from_le_bytes(rec[8..16].try_into().unwrap());
        if user as u64 >= m || item as u64 >= n {
            return Err(Error::Format(format!(
                "record {idx}: ({user}, {item}) outside {m}x{n}"
            )));
        }
        entries.push(Rating::new(user, item, value as Real));
    }
    let mut tail = [0u8; 1];
    if input.read(&mut tail)? != 0 {
        return Err(Error::Format(format!("trailing bytes after {nnz} records")));
    }
    let meta = DatasetMeta {
        name: name.to_string(),
        m,
        n,
        nnz,
        declared_nnz: None,
        format: SourceFormat::Binary,
    };
    Ok((meta, entries))
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<Rating>)> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_binary_from(BufReader::new(File::open(path)?), &name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(meta: &DatasetMeta, e: &[Rating]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_binary_to(&mut buf, meta, e).unwrap();
        buf
    }

    #[test]
    fn layout_is_fixed() {
        let e = vec![Rating::new(1, 2, 0.5)];
        let meta = DatasetMeta::from_entries("x", &e, SourceFormat::Text);
        let buf = encode(&meta, &e);
        assert_eq!(buf.len(), 32 + 16);
        assert_eq!(&buf[0..4], b"NMDB");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[32..36], &1u32.to_le_bytes());
        assert_eq!(&buf[40..48], &0.5f64.to_le_bytes());
    }

    #[test]
    fn empty_roundtrip() {
        let meta = DatasetMeta::from_entries("e", &[], SourceFormat::Text);
        let (back, e) = read_binary_from(encode(&meta, &[]).as_slice(), "e").unwrap();
        assert!(e.is_empty());
        assert_eq!(back.nnz, 0);
    }

    #[test]
    fn corrupt_inputs() {
        let e = vec![Rating::new(0, 0, 1.0), Rating::new(1, 1, 2.0)];
        let meta = DatasetMeta::from_entries("x", &e, SourceFormat::Text);
        let buf = encode(&meta, &e);
        for cut in [0, 3, 31, 40, buf.len() - 1] {
            assert!(read_binary_from(&buf[..cut], "x").is_err(), "cut at {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_binary_from(bad.as_slice(), "x").unwrap_err().to_string().contains("magic"));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_binary_from(bad.as_slice(), "x").is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_binary_from(long.as_slice(), "x").is_err());
        let mut wrong_meta = meta.clone();
        wrong_meta.nnz = 3;
        assert!(write_binary_to(Vec::new(), &wrong_meta, &e).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip(raw in proptest::collection::vec((0u32..50, 0u32..40, -1e6f64..1e6), 0..40)) {
            let e: Vec<Rating> = raw.iter().map(|&(i, j, v)| Rating::new(i, j, v as Real)).collect();
            let meta = DatasetMeta::from_entries("p", &e, SourceFormat::Text);
            let (back_meta, back) = read_binary_from(encode(&meta, &e).as_slice(), "p").unwrap();
            prop_assert_eq!(back, e);
            prop_assert_eq!((back_meta.m, back_meta.n, back_meta.nnz), (meta.m, meta.n, meta.nnz));
        }
    }
}
