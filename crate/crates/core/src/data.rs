//! Categorical datasets on disk.
//!
//! Two formats are supported: CSV with one sample per line, integer
//! categories and `?` for missing entries; and a little-endian binary file
//! with magic `PCDS`, the sample count (u64), the variable count (u32) and
//! then every value as u16 with `0xFFFF` for missing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::runtime::Batch;

const MAGIC: &[u8; 4] = b"PCDS";
const MISSING_U16: u16 = u16::MAX;

/// Samples plus the number of categories of every variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Batch,
    pub num_categories: Vec<u32>,
}

impl Dataset {
    /// Wraps samples, inferring each variable's category count as its
    /// largest observed value plus one.
    pub fn from_batch(samples: Batch) -> Self {
        let mut ncat = vec![0u32; samples.num_vars()];
        for s in 0..samples.len() {
            for (v, n) in ncat.iter_mut().enumerate() {
                if let Some(x) = samples.get(s, v) {
                    *n = (*n).max(x + 1);
                }
            }
        }
        Dataset { samples, num_categories: ncat }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_vars(&self) -> usize {
        self.samples.num_vars()
    }

    /// Fails if any value exceeds the given per-variable category counts.
    pub fn check_categories(&self, ncat: &[u32]) -> Result<()> {
        if ncat.len() != self.num_vars() {
            return Err(Error::Data(format!("dataset has {} variables, expected {}", self.num_vars(), ncat.len())));
        }
        for (v, (&have, &limit)) in self.num_categories.iter().zip(ncat).enumerate() {
            if have > limit {
                return Err(Error::Data(format!("variable {v} takes value {} but has {limit} categories", have - 1)));
            }
        }
        Ok(())
    }
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut batch: Option<Batch> = None;
    let mut row = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        row.clear();
        for field in rec.iter() {
            row.push(match field {
                "?" => None,
                f => Some(
                    f.parse::<u32>()
                        .ok()
                        .filter(|&x| x < u32::MAX)
                        .ok_or_else(|| Error::parse(line, format!("invalid category {f:?}")))?,
                ),
            });
        }
        let b = batch.get_or_insert_with(|| Batch::new(row.len()));
        if row.len() != b.num_vars() {
            return Err(Error::parse(line, format!("expected {} fields, found {}", b.num_vars(), row.len())));
        }
        b.push(&row);
    }
    let batch = batch.ok_or_else(|| Error::Data("dataset is empty".into()))?;
    Ok(Dataset::from_batch(batch))
}

pub fn write_csv(data: &Batch, out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for s in 0..data.len() {
        let fields: Vec<String> = data.row(s).iter().map(|v| v.map_or("?".to_string(), |x| x.to_string())).collect();
        w.write_record(&fields).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(mut r: impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a binary dataset (bad magic)".into()));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let num_vars = r.read_u32::<LittleEndian>()? as usize;
    let total = n.checked_mul(num_vars).ok_or_else(|| Error::Data("dataset dimensions overflow".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != total * 2 {
        return Err(Error::Data(format!("expected {} value bytes, found {}", total * 2, bytes.len())));
    }
    let mut batch = Batch::new(num_vars);
    let mut row = vec![None; num_vars];
    for sample in bytes.chunks_exact(2 * num_vars.max(1)).take(n) {
        for (dst, v) in row.iter_mut().zip(sample.chunks_exact(2)) {
            let v = u16::from_le_bytes([v[0], v[1]]);
            *dst = (v != MISSING_U16).then_some(v as u32);
        }
        batch.push(&row);
    }
    Ok(Dataset::from_batch(batch))
}

pub fn write_binary(data: &Batch, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    w.write_u32::<LittleEndian>(data.num_vars() as u32)?;
    for s in 0..data.len() {
        for v in 0..data.num_vars() {
            let x = match data.get(s, v) {
                None => MISSING_U16,
                Some(x) if x < MISSING_U16 as u32 => x as u16,
                Some(x) => return Err(Error::Data(format!("value {x} does not fit the binary format"))),
            };
            w.write_u16::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset, choosing the format from the file's magic bytes.
pub fn load(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        read_binary(bytes.as_slice())
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Data("dataset is neither binary nor UTF-8 text".into()))?;
        parse_csv(&text)
    }
}

/// Saves as binary when the extension is `.bin`, CSV otherwise.
pub fn save(data: &Batch, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "bin") {
        write_binary(data, w)
    } else {
        write_csv(data, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_missing() {
        let d = parse_csv("0, 1,?\n2,0,1\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples.row(0), vec![Some(0), Some(1), None]);
        assert_eq!(d.num_categories, vec![3, 2, 2]);
        let mut out = Vec::new();
        write_csv(&d.samples, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "0,1,?\n2,0,1\n");
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        assert!(matches!(parse_csv("0,1\n0,x\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_csv("0,1\n0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn binary_round_trip() {
        let d = parse_csv("3,?\n0,7\n").unwrap();
        let mut bytes = Vec::new();
        write_binary(&d.samples, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PCDS");
        assert_eq!(bytes.len(), 4 + 8 + 4 + 2 * 4);
        assert_eq!(read_binary(bytes.as_slice()).unwrap(), d);
        assert!(read_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn category_check() {
        let d = parse_csv("3,1\n").unwrap();
        assert!(d.check_categories(&[4, 2]).is_ok());
        assert!(d.check_categories(&[3, 2]).is_err());
    }
}
