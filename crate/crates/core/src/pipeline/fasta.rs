use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProteinRecord {
    pub id: String,
    pub sequence: String,
}

impl ProteinRecord {
    pub fn new(id: impl Into<String>, sequence: impl Into<String>) -> Self {
        Self { id: id.into(), sequence: sequence.into() }
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

/// Parses FASTA text. The id is the header up to the first whitespace;
/// sequence lines are joined, whitespace-stripped and uppercased.
pub fn parse_fasta(reader: impl BufRead) -> Result<Vec<ProteinRecord>> {
    let mut records: Vec<ProteinRecord> = Vec::new();
    let mut seen = HashSet::new();
    let finish = |records: &mut Vec<ProteinRecord>| -> Result<()> {
        if let Some(r) = records.last() {
            if r.sequence.is_empty() {
                return Err(Error::Ingestion(format!("record {} has an empty sequence", r.id)));
            }
        }
        Ok(())
    };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if let Some(header) = line.strip_prefix('>') {
            finish(&mut records)?;
            let id = header.split_whitespace().next().unwrap_or("");
            if id.is_empty() {
                return Err(Error::Ingestion(format!("line {lineno}: header without an id")));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::Ingestion(format!("line {lineno}: duplicate id {id}")));
            }
            records.push(ProteinRecord::new(id, String::new()));
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some(current) = records.last_mut() else {
            return Err(Error::Ingestion(format!("line {lineno}: sequence data before the first header")));
        };
        for c in line.chars().filter(|c| !c.is_whitespace()) {
            let u = c.to_ascii_uppercase();
            if !u.is_ascii_uppercase() {
                return Err(Error::Ingestion(format!("line {lineno}: invalid residue {c:?} in {}", current.id)));
            }
            current.sequence.push(u);
        }
    }
    finish(&mut records)?;
    Ok(records)
}

pub fn read_fasta(path: &Path) -> Result<Vec<ProteinRecord>> {
    parse_fasta(BufReader::new(fs::File::open(path)?))
}

/// Writes records with sequence lines wrapped at 60 residues.
pub fn write_fasta(records: &[ProteinRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        writeln!(w, ">{}", r.id)?;
        for chunk in r.sequence.as_bytes().chunks(60) {
            w.write_all(chunk)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn parse(s: &str) -> Result<Vec<ProteinRecord>> {
        parse_fasta(s.as_bytes())
    }

    #[test]
    fn basic_records() {
        assert_eq!(parse(">P1\nACDE\n").unwrap(), vec![ProteinRecord::new("P1", "ACDE")]);
        assert_eq!(parse(">P1\nAC\nDE\n").unwrap(), vec![ProteinRecord::new("P1", "ACDE")]);
        let r = parse(">sp|Q1 some description\nac de\n\n>Q2\nMK\n").unwrap();
        assert_eq!(r, vec![ProteinRecord::new("sp|Q1", "ACDE"), ProteinRecord::new("Q2", "MK")]);
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn ingestion_errors() {
        for bad in [">P1\nAC\n>P1\nDE\n", ">P1\nAC1\n", ">P1\nAC*\n", "ACDE\n", ">\nAC\n", ">P1\n>P2\nAC\n"] {
            assert!(matches!(parse(bad), Err(Error::Ingestion(_))), "{bad:?}");
        }
    }

    #[test]
    fn thousand_records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let alphabet = b"ACDEFGHIKLMNPQRSTVWYXBZUO";
        let records: Vec<ProteinRecord> = (0..1000)
            .map(|i| {
                let len = rng.random_range(1..300);
                let seq = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())] as char).collect::<String>();
                ProteinRecord::new(format!("prot{i}"), seq)
            })
            .collect();
        let mut buf = Vec::new();
        write_fasta(&records, &mut buf).unwrap();
        assert_eq!(parse_fasta(buf.as_slice()).unwrap(), records);
    }
}
