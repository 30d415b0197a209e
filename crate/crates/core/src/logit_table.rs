//! Ingestion of externally computed logits.
//!
//! CSV layout: header `split,label,logit_0,...,logit_{K-1}`; `split` is one of
//! `source_cal`, `source_test`, `target_cal`, `target_test`; `label` is a
//! 1-based class index or `MISSING` (allowed only for `target_cal`).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scores::{LabeledSample, LogitModel, StoredLogits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    SourceCal,
    SourceTest,
    TargetCal,
    TargetTest,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::SourceCal, SplitTag::SourceTest, SplitTag::TargetCal, SplitTag::TargetTest];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::SourceCal => "source_cal",
            SplitTag::SourceTest => "source_test",
            SplitTag::TargetCal => "target_cal",
            SplitTag::TargetTest => "target_test",
        }
    }

    fn label_optional(&self) -> bool {
        *self == SplitTag::TargetCal
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SplitTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown split tag '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow {
    pub split: SplitTag,
    /// 0-based label.
    pub label: Option<usize>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    classes: usize,
    rows: Vec<LogitRow>,
}

impl LogitTable {
    pub fn new(classes: usize, rows: Vec<LogitRow>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::TooFewClasses(classes));
        }
        for (i, r) in rows.iter().enumerate() {
            // header occupies line 1
            let line = i + 2;
            if r.logits.len() != classes {
                return Err(Error::Parse { line, message: format!("expected {classes} logits, got {}", r.logits.len()) });
            }
            match r.label {
                Some(y) if y >= classes => {
                    return Err(Error::Parse { line, message: format!("label {} out of range 1..={classes}", y + 1) })
                }
                None if !r.split.label_optional() => {
                    return Err(Error::Parse { line, message: format!("MISSING label not allowed in {}", r.split) })
                }
                _ => {}
            }
        }
        Ok(Self { classes, rows })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[LogitRow] {
        &self.rows
    }

    pub fn model(&self) -> StoredLogits {
        StoredLogits::new(self.classes).expect("validated class count")
    }

    pub fn inputs(&self, split: SplitTag) -> Vec<Vec<f64>> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.logits.clone()).collect()
    }

    /// Labeled rows of a split; `None` if any row of the split lacks a label.
    pub fn labeled(&self, split: SplitTag) -> Option<Vec<LabeledSample>> {
        self.rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.label.map(|y| LabeledSample::new(r.logits.clone(), y)))
            .collect()
    }

    /// Logits of `model` on tagged samples, for round-trips and audits.
    pub fn from_model<M: LogitModel>(model: &M, splits: &[(SplitTag, &[LabeledSample<M::Input>])]) -> Result<Self> {
        let mut rows = Vec::new();
        for (split, samples) in splits {
            for s in samples.iter() {
                rows.push(LogitRow { split: *split, label: Some(s.y), logits: model.logits(&s.x)? });
            }
        }
        Self::new(model.num_classes(), rows)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
        if header.len() < 4 || &header[0] != "split" || &header[1] != "label" {
            return Err(Error::Parse { line: 1, message: "header must be split,label,logit_0,...".into() });
        }
        let classes = header.len() - 2;
        for (k, name) in header.iter().skip(2).enumerate() {
            if name != format!("logit_{k}") {
                return Err(Error::Parse { line: 1, message: format!("expected column logit_{k}, found '{name}'") });
            }
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |message: String| Error::Parse { line, message };
            if rec.len() != classes + 2 {
                return Err(err(format!("expected {} fields, got {}", classes + 2, rec.len())));
            }
            let split: SplitTag = rec[0].parse().map_err(err)?;
            let label = match &rec[1] {
                "MISSING" => None,
                s => {
                    let y: usize = s.parse().map_err(|_| err(format!("bad label '{s}'")))?;
                    if y == 0 || y > classes {
                        return Err(err(format!("label {y} out of range 1..={classes}")));
                    }
                    Some(y - 1)
                }
            };
            if label.is_none() && !split.label_optional() {
                return Err(err(format!("MISSING label not allowed in {split}")));
            }
            let logits = rec
                .iter()
                .skip(2)
                .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("logits must be finite numbers".into()))?;
            rows.push(LogitRow { split, label, logits });
        }
        Self::new(classes, rows)
    }

    /// Writes shortest round-trip float representations, so re-reading is bit-exact.
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut header = String::from("split,label");
        for k in 0..self.classes {
            header.push_str(&format!(",logit_{k}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.rows {
            let label = r.label.map_or_else(|| "MISSING".to_string(), |y| (y + 1).to_string());
            let mut line = format!("{},{label}", r.split);
            for v in &r.logits {
                line.push_str(&format!(",{v:?}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

pub fn load_logit_table<P: AsRef<Path>>(path: P) -> Result<LogitTable> {
    let file = std::fs::File::open(path.as_ref())?;
    LogitTable::read(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::{margin, score, LinearLogitMap};

    #[test]
    fn parses_hand_written_table() {
        let text = "split,label,logit_0,logit_1,logit_2\r\n\
                    source_cal,1,2.0,0.5,-1\r\n\
                    target_cal,MISSING,0,3,1\r\n\
                    target_test,3,1,1,4.5\r\n";
        let t = LogitTable::read(text.as_bytes()).unwrap();
        assert_eq!(t.classes(), 3);
        let m = t.model();
        let rows = t.rows();
        assert_eq!(margin(&m, &rows[0].logits, rows[0].label.unwrap()).unwrap(), 1.5);
        assert_eq!(rows[1].label, None);
        assert_eq!(margin(&m, &rows[2].logits, 2).unwrap(), 3.5);
        assert!(t.labeled(SplitTag::TargetCal).is_none());
        assert_eq!(t.labeled(SplitTag::TargetTest).unwrap().len(), 1);
        assert_eq!(t.inputs(SplitTag::TargetCal), vec![vec![0.0, 3.0, 1.0]]);
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let missing = "split,label,logit_0,logit_1\nsource_cal,1,0,1\nsource_cal,MISSING,0,1\n";
        assert!(matches!(LogitTable::read(missing.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let bad_split = "split,label,logit_0,logit_1\nholdout,1,0,1\n";
        assert!(matches!(LogitTable::read(bad_split.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let ragged = "split,label,logit_0,logit_1\nsource_cal,1,0,1\nsource_cal,1,0\n";
        assert!(matches!(LogitTable::read(ragged.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let bad_label = "split,label,logit_0,logit_1\nsource_cal,3,0,1\n";
        assert!(matches!(LogitTable::read(bad_label.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let bad_header = "split,label,foo,logit_1\n";
        assert!(matches!(LogitTable::read(bad_header.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let nan = "split,label,logit_0,logit_1\nsource_cal,1,NaN,1\n";
        assert!(LogitTable::read(nan.as_bytes()).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let map = LinearLogitMap::new(vec![vec![0.1, -0.7], vec![1.0 / 3.0, 2.5e-8], vec![-1.9, 0.3]], vec![0.01, -0.2, 1e-12]).unwrap();
        let samples: Vec<LabeledSample> = (0..50)
            .map(|i| LabeledSample::new(vec![(i as f64).sin() * 3.7, (i as f64 * 0.3).cos() / 7.0], i % 3))
            .collect();
        let table = LogitTable::from_model(&map, &[(SplitTag::SourceCal, &samples[..25]), (SplitTag::TargetTest, &samples[25..])]).unwrap();
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        let back = LogitTable::read(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        let stored = back.model();
        for (row, s) in back.rows().iter().zip(&samples) {
            for y in 0..3 {
                assert_eq!(score(&stored, &row.logits, y).unwrap().to_bits(), score(&map, &s.x, y).unwrap().to_bits());
            }
        }
    }
}
