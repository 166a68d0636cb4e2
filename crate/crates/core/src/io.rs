//! Shared helpers for the CSV artifacts.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Run identity embedded in every artifact so reruns can be matched to configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, master_seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            master_seed,
        }
    }

    pub fn header_line(&self) -> String {
        format!(
            "# crcvoi config_hash={} master_seed={}",
            self.config_hash, self.master_seed
        )
    }

    /// Parses the header written by [`Provenance::header_line`].
    pub fn parse_header(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# crcvoi ")?;
        let mut hash = None;
        let mut seed = None;
        for field in rest.split_whitespace() {
            if let Some(v) = field.strip_prefix("config_hash=") {
                hash = Some(v.to_string());
            } else if let Some(v) = field.strip_prefix("master_seed=") {
                seed = v.parse().ok();
            }
        }
        Some(Self::new(hash?, seed?))
    }
}

pub(crate) fn write_header<W: Write>(w: &mut W, provenance: Option<&Provenance>) -> Result<()> {
    if let Some(p) = provenance {
        writeln!(w, "{}", p.header_line())?;
    }
    Ok(())
}

/// Reads the leading provenance comment, if any, without consuming data rows.
pub(crate) fn peek_provenance<R: BufRead>(r: &mut R) -> Result<Option<Provenance>> {
    let buf = r.fill_buf()?;
    if buf.first() != Some(&b'#') {
        return Ok(None);
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    Ok(Provenance::parse_header(line.trim_end()))
}

pub(crate) fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

/// Formats a number for fixed-schema CSV output with a round-trippable representation.
pub(crate) fn num(x: f64) -> String {
    format!("{x}")
}
