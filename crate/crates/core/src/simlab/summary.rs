//! Per-(setting, method) Monte Carlo summaries of replication records.

use std::collections::BTreeMap;

use super::{ReplicationRecord, Study};
use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub study: Study,
    pub setting: String,
    pub method: String,
    /// Successful replications.
    pub n_reps: usize,
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub mean_width: f64,
    pub width_mcse: f64,
    pub mean_post_sd: f64,
    pub post_sd_mcse: f64,
    pub rmse: f64,
    pub rmse_mcse: f64,
    pub bias: f64,
    pub bias_mcse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryReport {
    pub rows: Vec<SummaryRow>,
}

impl SummaryReport {
    pub fn get(&self, setting: &str, method: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.setting == setting && r.method == method)
    }
}

/// Coverage, width, posterior SD, RMSE and bias per `(study, setting, method)`
/// over successful records, with Monte Carlo standard errors: binomial for
/// coverage, delta method for RMSE, standard error of the mean otherwise.
pub fn summarize(records: &[ReplicationRecord]) -> Result<SummaryReport> {
    let mut groups: BTreeMap<(Study, &str, &str), Vec<&ReplicationRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.study, &r.setting, &r.method)).or_default().push(r);
    }
    if groups.is_empty() {
        return Err(Error::MissingGroup("no records to summarize".into()));
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((study, setting, method), recs) in groups {
        let ok: Vec<&ReplicationRecord> = recs.into_iter().filter(|r| r.is_ok()).collect();
        if ok.is_empty() {
            return Err(Error::MissingGroup(format!(
                "no successful records for {study}/{setting}/{method}"
            )));
        }
        let n = ok.len() as f64;
        let hits: Vec<f64> = ok.iter().map(|r| f64::from(u8::from(r.covers()))).collect();
        let widths: Vec<f64> = ok.iter().map(|r| r.ci_hi - r.ci_lo).collect();
        let sds: Vec<f64> = ok.iter().map(|r| r.post_sd).collect();
        let errs: Vec<f64> = ok.iter().map(|r| r.estimate - r.truth).collect();
        let sq: Vec<f64> = errs.iter().map(|e| e * e).collect();
        let coverage = stats::mean(&hits);
        let rmse = stats::mean(&sq).sqrt();
        let rmse_mcse = if rmse > 0.0 { stats::sd(&sq) / (n.sqrt() * 2.0 * rmse) } else { 0.0 };
        rows.push(SummaryRow {
            study,
            setting: setting.to_string(),
            method: method.to_string(),
            n_reps: ok.len(),
            coverage,
            coverage_mcse: (coverage * (1.0 - coverage) / n).sqrt(),
            mean_width: stats::mean(&widths),
            width_mcse: stats::mcse(&widths),
            mean_post_sd: stats::mean(&sds),
            post_sd_mcse: stats::mcse(&sds),
            rmse,
            rmse_mcse,
            bias: stats::mean(&errs),
            bias_mcse: stats::mcse(&errs),
        });
    }
    Ok(SummaryReport { rows })
}
