//! Evaluation summaries and their CSV form.

use std::path::Path;

use crate::error::{Error, Result};

use super::metrics::F1Rule;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub sample_id: u64,
    pub epe: f64,
    pub f1_all: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over samples of per-sample EPE.
    pub epe: f64,
    /// Mean over samples of per-sample outlier fraction.
    pub f1_all: f64,
    pub rule: F1Rule,
    pub per_sample: Vec<SampleScore>,
}

pub const REPORT_HEADER: [&str; 3] = ["sample_id", "epe", "f1_all"];

impl EvalReport {
    pub fn from_scores(per_sample: Vec<SampleScore>, rule: F1Rule) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::invalid("EvalReport", "no samples"));
        }
        let n = per_sample.len() as f64;
        Ok(EvalReport {
            epe: per_sample.iter().map(|s| s.epe).sum::<f64>() / n,
            f1_all: per_sample.iter().map(|s| s.f1_all).sum::<f64>() / n,
            rule,
            per_sample,
        })
    }

    /// `epe=<x> f1_all=<y>` with the outlier rule named.
    pub fn summary(&self) -> String {
        format!("epe={:.6} f1_all={:.6} f1_rule={}", self.epe, self.f1_all, self.rule)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::invalid("EvalReport", e.to_string());
        w.write_record(REPORT_HEADER).map_err(fail)?;
        for s in &self.per_sample {
            w.serialize((s.sample_id, s.epe, s.f1_all)).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid("EvalReport", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}
