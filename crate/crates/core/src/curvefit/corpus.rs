//! Line-delimited curve corpora and fit reports.
//!
//! Corpus line: `{"id":"run-3","points":[[0,0.41],[1,0.52],...]}`.
//! Report line: `{"id":"run-3","family":"exponential","alpha":[...],"rmse":...,"r_square":...,"knee":...}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CurveFamily, CurveFit, ObservationSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub points: Vec<(u32, f64)>,
}

impl CorpusRecord {
    pub fn series(&self) -> Result<ObservationSeries, super::CurveError> {
        ObservationSeries::new(self.points.clone())
    }
}

/// A line that could not be turned into a series.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

/// Usable series plus the lines that were skipped.
pub type ParsedCorpus = (Vec<(CorpusRecord, ObservationSeries)>, Vec<SkippedLine>);

/// Parses a corpus, collecting unparseable or invalid lines separately.
/// Blank lines are ignored.
pub fn read_corpus<R: BufRead>(reader: R) -> std::io::Result<ParsedCorpus> {
    let mut good = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<CorpusRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|rec| rec.series().map(|s| (rec, s)).map_err(|e| e.to_string()));
        match parsed {
            Ok(pair) => good.push(pair),
            Err(reason) => skipped.push(SkippedLine { line: i + 1, reason }),
        }
    }
    Ok((good, skipped))
}

pub fn write_corpus<W: Write>(mut writer: W, records: &[CorpusRecord]) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut writer, rec)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub id: String,
    pub family: CurveFamily,
    pub alpha: Vec<f64>,
    pub rmse: f64,
    pub r_square: Option<f64>,
    pub knee: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

impl FitReport {
    pub fn new(id: impl Into<String>, fit: &CurveFit, failed: bool) -> Self {
        FitReport {
            id: id.into(),
            family: fit.family,
            alpha: fit.alpha.clone(),
            rmse: fit.rmse,
            r_square: fit.r_square,
            knee: fit.knee,
            failed,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_lines_are_skipped_not_fatal() {
        let text = "{\"id\":\"a\",\"points\":[[0,0.1],[1,0.2]]}\n\nnot json\n{\"id\":\"b\",\"points\":[[1,0.1],[0,0.2]]}\n";
        let (good, skipped) = read_corpus(text.as_bytes()).unwrap();
        assert_eq!(good.len(), 1);
        assert_eq!(good[0].0.id, "a");
        assert_eq!(skipped.iter().map(|s| s.line).collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn written_corpus_reads_back() {
        let recs = vec![CorpusRecord {
            id: "x".into(),
            points: vec![(0, 0.25), (1, 0.5)],
        }];
        let mut buf = Vec::new();
        write_corpus(&mut buf, &recs).unwrap();
        let (good, skipped) = read_corpus(buf.as_slice()).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(good[0].0, recs[0]);
    }
}
