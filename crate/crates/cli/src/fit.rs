use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::warn;
use optplan_core::curvefit::corpus::{read_corpus, FitReport};
use optplan_core::curvefit::{self, CurveError, CurveFamily};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum FamilyArg {
    Power,
    MultiPower,
    Exp,
    MultiExp,
    All,
}

impl FamilyArg {
    fn families(self) -> Vec<CurveFamily> {
        match self {
            FamilyArg::Power => vec![CurveFamily::Power],
            FamilyArg::MultiPower => vec![CurveFamily::MultiPower],
            FamilyArg::Exp => vec![CurveFamily::Exponential],
            FamilyArg::MultiExp => vec![CurveFamily::MultiExponential],
            FamilyArg::All => CurveFamily::ALL.to_vec(),
        }
    }
}

/// Corpus averages for one family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilySummary {
    pub family: CurveFamily,
    pub fitted: usize,
    pub failed: usize,
    pub skipped: usize,
    pub mean_rmse: Option<f64>,
    /// Mean over series with a defined R².
    pub mean_r_square: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn default_out(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_name().unwrap_or_default().to_os_string();
    name.push(".fits.jsonl");
    corpus.with_file_name(name)
}

pub fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".summary.json");
    out.with_file_name(name)
}

pub fn run(corpus: &Path, family: FamilyArg, out: Option<&Path>) -> Result<()> {
    let file = File::open(corpus).with_context(|| format!("opening {}", corpus.display()))?;
    let (series, skipped) = read_corpus(BufReader::new(file))?;
    for s in &skipped {
        warn!("{}:{}: skipped: {}", corpus.display(), s.line, s.reason);
    }
    if series.is_empty() {
        bail!("{} holds no usable series", corpus.display());
    }

    let out = out.map(Path::to_path_buf).unwrap_or_else(|| default_out(corpus));
    let mut writer = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    let mut summaries = Vec::new();
    for fam in family.families() {
        let (mut rmse, mut r2) = (Vec::new(), Vec::new());
        let (mut failed, mut skipped) = (0, 0);
        for (rec, s) in &series {
            let (fit, is_failed) = match curvefit::fit(s, fam) {
                Ok(f) => (f, false),
                Err(CurveError::FitFailure { best }) => (*best, true),
                Err(e) => {
                    warn!("{}: {fam}: skipped: {e}", rec.id);
                    skipped += 1;
                    continue;
                }
            };
            writeln!(writer, "{}", FitReport::new(&rec.id, &fit, is_failed).to_line())?;
            if is_failed {
                warn!("{}: {fam}: no start converged", rec.id);
                failed += 1;
                continue;
            }
            rmse.push(fit.rmse);
            r2.extend(fit.r_square);
        }
        summaries.push(FamilySummary {
            family: fam,
            fitted: rmse.len(),
            failed,
            skipped,
            mean_rmse: mean(&rmse),
            mean_r_square: mean(&r2),
        });
    }
    writer.flush()?;

    let summary_file = summary_path(&out);
    let mut doc = serde_json::to_string_pretty(&summaries)?;
    doc.push('\n');
    std::fs::write(&summary_file, doc).with_context(|| format!("writing {}", summary_file.display()))?;

    println!("{:<18} {:>7} {:>7} {:>8} {:>12} {:>10}", "family", "fitted", "failed", "skipped", "mean_rmse", "mean_r2");
    let fmt = |v: Option<f64>, f: fn(f64) -> String| v.map(f).unwrap_or_else(|| "-".into());
    for s in &summaries {
        println!(
            "{:<18} {:>7} {:>7} {:>8} {:>12} {:>10}",
            s.family.as_str(),
            s.fitted,
            s.failed,
            s.skipped,
            fmt(s.mean_rmse, |v| format!("{v:.4e}")),
            fmt(s.mean_r_square, |v| format!("{v:.6}")),
        );
    }
    println!("fit records written to {}", out.display());
    if summaries.iter().all(|s| s.fitted == 0) {
        bail!("no series could be fitted");
    }
    Ok(())
}
