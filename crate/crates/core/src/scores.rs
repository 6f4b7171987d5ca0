//! Score files: CSV with header `sample_id,score,origin,dataset,method`.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Id,
    Ood,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Id => "id",
            Origin::Ood => "ood",
        })
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(Origin::Id),
            "ood" => Ok(Origin::Ood),
            _ => Err(Error::config(format!("origin must be 'id' or 'ood', got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: u64,
    pub score: f64,
    pub origin: Origin,
    pub dataset: String,
    pub method: String,
}

/// Scores for one dataset under one method, in input order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn from_scores(scores: &[f64], origin: Origin, dataset: &str, method: &str) -> Self {
        let records = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoreRecord {
                sample_id: i as u64,
                score,
                origin,
                dataset: dataset.to_string(),
                method: method.to_string(),
            })
            .collect();
        ScoreSet { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["sample_id", "score", "origin", "dataset", "method"];
        if headers.iter().ne(expected) {
            return Err(Error::Data {
                message: format!("score file header (line 1) must be {}, got {}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
                offset: None,
            });
        }
        let mut records = Vec::new();
        for rec in rdr.deserialize() {
            let rec: ScoreRecord = rec?;
            if !rec.score.is_finite() {
                return Err(Error::Data {
                    message: format!("score {} for sample {} is not finite (line {})", rec.score, rec.sample_id, records.len() + 2),
                    offset: None,
                });
            }
            records.push(rec);
        }
        Ok(ScoreSet { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_reader(File::open(path)?).map_err(|e| match e {
            Error::Data { message, offset } => Error::Data { message: format!("{}: {message}", path.display()), offset },
            e => e,
        })
    }

    pub fn to_writer(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.records.is_empty() {
            w.write_record(["sample_id", "score", "origin", "dataset", "method"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_writer(File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let set = ScoreSet::from_scores(&[0.5, -1.25, 3.0e-9], Origin::Ood, "noise", "gaia-z");
        let mut buf = Vec::new();
        set.to_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,score,origin,dataset,method\n0,0.5,ood,noise,gaia-z\n"));
        assert_eq!(ScoreSet::from_reader(&buf[..]).unwrap(), set);
    }

    #[test]
    fn malformed_line_reported() {
        let text = "sample_id,score,origin,dataset,method\n0,1.0,id,a,m\n1,abc,id,a,m\n";
        let err = ScoreSet::from_reader(text.as_bytes()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn wrong_header() {
        assert!(ScoreSet::from_reader("a,b\n1,2\n".as_bytes()).is_err());
    }
}
