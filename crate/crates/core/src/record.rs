//! Persisted run results.
//!
//! A [`RunRecord`] is the durable product of one experiment: the effective
//! configuration, every replicate's evaluation history, and the aggregated
//! summary. Its JSON serialization is byte-deterministic — two runs of the
//! same configuration and seeds produce identical files — so records can be
//! diffed and content-addressed. Anything nondeterministic (wall-clock) goes
//! into a separate [`TimingSidecar`] instead of the record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TransferMatrix;
use crate::stream::EvalRow;

/// Bump when the record layout changes incompatibly.
pub const RECORD_VERSION: u32 = 1;

/// One replicate's full outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Mean batch loss of each pretraining epoch (empty without
    /// pretraining).
    pub pretrain_epoch_losses: Vec<f64>,
    /// Offline mode: mean batch loss of each training epoch (empty for
    /// stream runs).
    pub offline_epoch_losses: Vec<f64>,
    /// Every evaluation taken, in stream order.
    pub evals: Vec<EvalRow>,
    /// Stage-by-domain matrix (sequential stream runs only).
    pub transfer: Option<TransferMatrix>,
    pub final_per_domain_miou: Vec<f64>,
    /// Mean over domains of the final per-domain IoU.
    pub mean_final_miou: f64,
    /// Stream steps driven; 0 for offline runs.
    pub steps_run: usize,
    /// Audited parameter updates; equals `steps_run * budget` for stream
    /// runs, 0 for offline runs (offline training is the budget-exempt
    /// reference point).
    pub updates_applied: usize,
}

/// The durable result of one experiment over all its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub name: String,
    /// Effective configuration as sorted `(key, value)` pairs — exactly what
    /// [`crate::config::ExperimentConfig::echo`] produced.
    pub config: Vec<(String, String)>,
    /// Stream domain names in training order.
    pub domains: Vec<String>,
    /// For budget-normalized mixing runs: the plain-training budget that
    /// spends the same compute.
    pub baseline_budget: Option<usize>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedOutcome>,
    /// Per-domain final IoU, averaged over seeds.
    pub mean_final_per_domain: Vec<f64>,
    /// Arithmetic mean of `mean_final_per_domain` — the summary column.
    pub mean_final_miou: f64,
    /// Audited updates summed over seeds.
    pub total_updates: usize,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<RunRecord> {
        let record: RunRecord = serde_json::from_str(text)?;
        if record.version != RECORD_VERSION {
            return Err(Error::data(format!(
                "record version {} not supported (expected {RECORD_VERSION})",
                record.version
            )));
        }
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunRecord> {
        RunRecord::from_json(&fs::read_to_string(path)?)
    }

    /// The value of a config key in the echo, if present.
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Wall-clock timings, kept out of [`RunRecord`] so the record itself stays
/// byte-deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSidecar {
    pub total_seconds: f64,
    pub per_seed_seconds: Vec<f64>,
}

impl TimingSidecar {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TimingSidecar> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Header of the flat comma-separated summary.
pub const CSV_HEADER: &str =
    "name,mode,strategy,sim_mix,sim_ratio,budget,seeds,domains,per_domain_final_miou,mean_final_miou,total_updates";

fn csv_field(value: &str) -> String {
    // Fields stay unquoted; list-valued fields use `;` separators so the
    // document remains a flat comma-separated table.
    debug_assert!(!value.contains(','), "csv field {value:?} contains a comma");
    value.to_string()
}

/// One summary row per record, matching [`CSV_HEADER`].
pub fn csv_row(record: &RunRecord) -> String {
    let config = |key: &str, default: &str| -> String {
        record.config_value(key).unwrap_or(default).to_string()
    };
    let per_domain = record
        .mean_final_per_domain
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(";");
    [
        csv_field(&record.name),
        config("mode", "stream"),
        config("strategy", "-"),
        config("sim.mix", "none"),
        config("sim.ratio", "-"),
        config("stream.budget", "-"),
        record.seeds.len().to_string(),
        csv_field(&record.domains.join(";")),
        per_domain,
        format!("{:.6}", record.mean_final_miou),
        record.total_updates.to_string(),
    ]
    .join(",")
}

/// The full summary document for a set of records.
pub fn csv_summary(records: &[&RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TransferMatrix;
    use crate::stream::EvalTag;

    fn sample_record() -> RunRecord {
        let transfer = TransferMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.5, 0.25], vec![0.375, 0.625]],
        )
        .unwrap();
        let outcome = SeedOutcome {
            seed: 3,
            pretrain_epoch_losses: vec![2.5, 1.25],
            offline_epoch_losses: vec![],
            evals: vec![EvalRow {
                step: 4,
                tag: EvalTag::DomainEnd(0),
                per_domain_miou: vec![0.5, 0.25],
                per_domain_class_iou: vec![vec![Some(0.5), None], vec![Some(0.25), Some(0.0)]],
            }],
            transfer: Some(transfer),
            final_per_domain_miou: vec![0.375, 0.625],
            mean_final_miou: 0.5,
            steps_run: 8,
            updates_applied: 32,
        };
        RunRecord {
            version: RECORD_VERSION,
            name: "sample".into(),
            config: vec![
                ("mode".into(), "stream".into()),
                ("strategy".into(), "nt".into()),
                ("stream.budget".into(), "4".into()),
            ],
            domains: vec!["a".into(), "b".into()],
            baseline_budget: None,
            seeds: vec![3],
            per_seed: vec![outcome],
            mean_final_per_domain: vec![0.375, 0.625],
            mean_final_miou: 0.5,
            total_updates: 32,
        }
    }

    #[test]
    fn json_round_trip_preserves_the_record() {
        let record = sample_record();
        let text = record.to_json().unwrap();
        let back = RunRecord::from_json(&text).unwrap();
        assert_eq!(record, back);
        // Serialization is a pure function of the value.
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        let record = sample_record();
        record.save(&path).unwrap();
        assert_eq!(RunRecord::load(&path).unwrap(), record);

        let timing = TimingSidecar {
            total_seconds: 1.5,
            per_seed_seconds: vec![1.5],
        };
        let tpath = dir.path().join("timing.json");
        timing.save(&tpath).unwrap();
        assert_eq!(TimingSidecar::load(&tpath).unwrap(), timing);
    }

    #[test]
    fn unsupported_versions_are_rejected() {
        let mut record = sample_record();
        record.version = RECORD_VERSION + 1;
        let text = serde_json::to_string(&record).unwrap();
        assert!(RunRecord::from_json(&text).is_err());
    }

    #[test]
    fn csv_summary_has_one_row_per_record_and_exact_values() {
        let a = sample_record();
        let mut b = sample_record();
        b.name = "other".into();
        let text = csv_summary(&[&a, &b]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(
            lines[1],
            "sample,stream,nt,none,-,4,1,a;b,0.375000;0.625000,0.500000,32"
        );
        assert!(lines[2].starts_with("other,"));
        // Every row has the same number of comma-separated fields as the
        // header.
        let n = CSV_HEADER.split(',').count();
        for line in &lines {
            assert_eq!(line.split(',').count(), n, "{line}");
        }
    }
}
