use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::LandmarkSequence;
use crate::error::{Error, Result};

/// Reads one JSON record per line. Blank lines are skipped; records are
/// validated against `expected_n` landmarks per frame and returned in file
/// order.
pub fn load_sequences(path: impl AsRef<Path>, expected_n: usize) -> Result<Vec<LandmarkSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: LandmarkSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        seq.validate(expected_n)?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_sequences(path: impl AsRef<Path>, seqs: &[LandmarkSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for seq in seqs {
        serde_json::to_writer(&mut w, seq)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split `{other}` (expected train, dev or test)"
            ))),
        }
    }
}

/// Reads `<id> <split>` lines.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, Split)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<(String, Split)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut parts = line.split_whitespace();
        let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected `<id> <split>`, got `{line}`")));
        };
        let split = split.parse().map_err(|e: Error| parse_err(e.to_string()))?;
        if !seen.insert(id.to_string()) {
            return Err(parse_err(format!("duplicate id `{id}`")));
        }
        out.push((id.to_string(), split));
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, Split)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, split) in entries {
        writeln!(w, "{id} {split}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
