//! Report rendering: aligned summary tables, seed-averaged transfer
//! matrices, and grayscale heatmap images.
//!
//! Values are printed as percentages (the usual segmentation convention).
//! Heatmaps encode each matrix entry monotonically as luminance:
//! `round(255 * value)`, so brighter means higher IoU.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::metrics::TransferMatrix;
use crate::record::RunRecord;

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn percent(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn percent_cell(values: &[f64]) -> String {
    let (mean, std) = mean_std(values);
    if values.len() < 2 {
        percent(mean)
    } else {
        format!("{}±{}", percent(mean), percent(std))
    }
}

/// Aligned text table: one row per record, one column per domain, a mean
/// column, and (from the second row on) the mean's delta against the first
/// row. Domains are the union across records, in first-appearance order;
/// a record that never saw a domain shows `-`.
pub fn summary_table(records: &[&RunRecord]) -> String {
    let mut domains: Vec<String> = Vec::new();
    for r in records {
        for d in &r.domains {
            if !domains.contains(d) {
                domains.push(d.clone());
            }
        }
    }

    let mut header: Vec<String> = vec!["name".into()];
    header.extend(domains.iter().cloned());
    header.push("mean".into());
    header.push("vs_first".into());

    let mut rows: Vec<Vec<String>> = vec![header];
    let first_mean = records.first().map(|r| r.mean_final_miou);
    for (idx, r) in records.iter().enumerate() {
        let mut row = vec![r.name.clone()];
        for d in &domains {
            match r.domains.iter().position(|rd| rd == d) {
                None => row.push("-".into()),
                Some(col) => {
                    let per_seed: Vec<f64> = r
                        .per_seed
                        .iter()
                        .map(|o| o.final_per_domain_miou[col])
                        .collect();
                    row.push(percent_cell(&per_seed));
                }
            }
        }
        let means: Vec<f64> = r.per_seed.iter().map(|o| o.mean_final_miou).collect();
        row.push(percent_cell(&means));
        match (idx, first_mean) {
            (0, _) | (_, None) => row.push("-".into()),
            (_, Some(base)) => {
                let delta = (r.mean_final_miou - base) * 100.0;
                row.push(format!("{delta:+.1}"));
            }
        }
        rows.push(row);
    }

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:>width$}", width = widths[c]));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Elementwise seed-mean of a record's transfer matrices; `None` when any
/// replicate lacks one (mixed-mode or offline runs).
pub fn mean_transfer(record: &RunRecord) -> Option<TransferMatrix> {
    let mats: Vec<&TransferMatrix> = record
        .per_seed
        .iter()
        .map(|o| o.transfer.as_ref())
        .collect::<Option<_>>()?;
    let first = mats.first()?;
    let n = first.domains().len();
    let mut rows = vec![vec![0.0; n]; n];
    for m in &mats {
        if m.domains() != first.domains() {
            return None;
        }
        for (acc_row, row) in rows.iter_mut().zip(m.rows()) {
            for (acc, v) in acc_row.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    for row in &mut rows {
        for v in row.iter_mut() {
            *v /= mats.len() as f64;
        }
    }
    TransferMatrix::new(first.domains().to_vec(), rows).ok()
}

/// Render a transfer matrix as a grayscale image, one `cell x cell` block
/// per entry; luminance is `round(255 * value)`.
pub fn transfer_heatmap(matrix: &TransferMatrix, cell: u32) -> Result<GrayImage> {
    if cell == 0 {
        return Err(Error::config("heatmap cell size must be positive"));
    }
    let n = matrix.domains().len() as u32;
    let mut img = GrayImage::new(n * cell, n * cell);
    for (y, x, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let stage = (y / cell) as usize;
        let domain = (x / cell) as usize;
        let v = matrix.get(stage, domain);
        *px = Luma([(v * 255.0).round() as u8]);
    }
    Ok(img)
}

/// A transfer matrix as aligned text, stages down, domains across.
pub fn transfer_table(matrix: &TransferMatrix) -> String {
    let mut out = String::new();
    let name_w = matrix
        .domains()
        .iter()
        .map(|d| d.len())
        .max()
        .unwrap_or(0)
        .max("after".len());
    out.push_str(&format!("{:>name_w$}", "after"));
    for d in matrix.domains() {
        out.push_str(&format!("  {d:>6}"));
    }
    out.push('\n');
    for (i, row) in matrix.rows().iter().enumerate() {
        out.push_str(&format!("{:>name_w$}", matrix.domains()[i]));
        for v in row {
            out.push_str(&format!("  {:>6}", percent(*v)));
        }
        out.push('\n');
    }
    out
}

/// Load every `record.json` under `dir` (the directory itself and one level
/// of subdirectories, the grid-cell layout). Unreadable or invalid files
/// become problem notes instead of failures; records come back sorted by
/// name for deterministic reports.
pub fn scan_records(dir: &Path) -> Result<(Vec<RunRecord>, Vec<String>)> {
    let mut records = Vec::new();
    let mut problems = Vec::new();
    let mut try_load = |path: &Path| {
        if !path.is_file() {
            return;
        }
        match RunRecord::load(path) {
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("{}: {e}", path.display())),
        }
    };
    try_load(&dir.join("record.json"));
    let entries = fs::read_dir(dir)?;
    let mut subdirs: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        try_load(&sub.join("record.json"));
    }
    if records.is_empty() && problems.is_empty() {
        return Err(Error::data(format!(
            "no record.json found under {}",
            dir.display()
        )));
    }
    records.sort_by(|a, b| a.name.cmp(&b.name));
    Ok((records, problems))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{SeedOutcome, RECORD_VERSION};

    fn fake_record(name: &str, domains: &[&str], per_seed_mious: &[Vec<f64>]) -> RunRecord {
        let per_seed: Vec<SeedOutcome> = per_seed_mious
            .iter()
            .enumerate()
            .map(|(i, mious)| {
                let transfer = TransferMatrix::new(
                    domains.iter().map(|d| d.to_string()).collect(),
                    vec![mious.clone(); domains.len()],
                )
                .unwrap();
                SeedOutcome {
                    seed: i as u64,
                    pretrain_epoch_losses: vec![],
                    offline_epoch_losses: vec![],
                    evals: vec![],
                    transfer: Some(transfer),
                    final_per_domain_miou: mious.clone(),
                    mean_final_miou: mious.iter().sum::<f64>() / mious.len() as f64,
                    steps_run: 4,
                    updates_applied: 16,
                }
            })
            .collect();
        let n = domains.len();
        let mut mean_final_per_domain = vec![0.0; n];
        for o in &per_seed {
            for (acc, v) in mean_final_per_domain
                .iter_mut()
                .zip(&o.final_per_domain_miou)
            {
                *acc += v;
            }
        }
        for v in &mut mean_final_per_domain {
            *v /= per_seed.len() as f64;
        }
        let mean_final_miou = mean_final_per_domain.iter().sum::<f64>() / n as f64;
        RunRecord {
            version: RECORD_VERSION,
            name: name.into(),
            config: vec![],
            domains: domains.iter().map(|d| d.to_string()).collect(),
            baseline_budget: None,
            seeds: (0..per_seed.len() as u64).collect(),
            per_seed,
            mean_final_per_domain,
            mean_final_miou,
            total_updates: 16 * per_seed_mious.len(),
        }
    }

    #[test]
    fn summary_table_shows_percentages_and_deltas() {
        let a = fake_record("base", &["m", "d"], &[vec![0.40, 0.20]]);
        let b = fake_record("better", &["m", "d"], &[vec![0.50, 0.30]]);
        let table = summary_table(&[&a, &b]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("name") && lines[0].contains("mean"));
        assert!(lines[1].contains("base") && lines[1].contains("40.0"));
        assert!(
            lines[1].trim_end().ends_with('-'),
            "first row has no delta: {:?}",
            lines[1]
        );
        assert!(
            lines[2].contains("better") && lines[2].contains("+10.0"),
            "{:?}",
            lines[2]
        );
    }

    #[test]
    fn summary_table_reports_seed_spread() {
        let r = fake_record("spread", &["m"], &[vec![0.40], vec![0.60]]);
        let table = summary_table(&[&r]);
        // Mean 50.0, sample std of {0.4, 0.6} is ~0.1414.
        assert!(table.contains("50.0±14.1"), "{table}");
    }

    #[test]
    fn summary_table_handles_disjoint_domain_sets() {
        let a = fake_record("one", &["m"], &[vec![0.4]]);
        let b = fake_record("two", &["z"], &[vec![0.8]]);
        let table = summary_table(&[&a, &b]);
        assert!(table.contains('m') && table.contains('z'));
        let one_row = table.lines().find(|l| l.contains("one")).unwrap();
        assert!(one_row.contains('-'), "{one_row}");
    }

    #[test]
    fn mean_transfer_averages_elementwise() {
        let r = fake_record("r", &["m", "d"], &[vec![0.25, 0.5], vec![0.75, 0.75]]);
        let mean = mean_transfer(&r).unwrap();
        assert_eq!(mean.get(0, 0), 0.5);
        assert_eq!(mean.get(0, 1), 0.625);
        let no_transfer = {
            let mut r = fake_record("r", &["m"], &[vec![0.5]]);
            r.per_seed[0].transfer = None;
            r
        };
        assert!(mean_transfer(&no_transfer).is_none());
    }

    #[test]
    fn heatmap_encodes_values_monotonically() {
        let m = TransferMatrix::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.0, 1.0 / 3.0], vec![2.0 / 3.0, 1.0]],
        )
        .unwrap();
        let img = transfer_heatmap(&m, 4).unwrap();
        assert_eq!(img.dimensions(), (8, 8));
        // Block constancy and exact luminance.
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(3, 3).0[0], 0);
        assert_eq!(img.get_pixel(4, 0).0[0], 85); // row 0, col 1
        assert_eq!(img.get_pixel(0, 4).0[0], 170); // row 1, col 0
        assert_eq!(img.get_pixel(7, 7).0[0], 255);
        assert!(transfer_heatmap(&m, 0).is_err());
    }

    #[test]
    fn transfer_table_lists_stages_by_row() {
        let m = TransferMatrix::new(
            vec!["m".into(), "d".into()],
            vec![vec![0.5, 0.25], vec![0.375, 0.625]],
        )
        .unwrap();
        let text = transfer_table(&m);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("50.0") && lines[1].contains("25.0"));
        assert!(lines[2].contains("37.5") && lines[2].contains("62.5"));
    }

    #[test]
    fn scanning_collects_records_and_problems() {
        let dir = tempfile::tempdir().unwrap();
        let a = fake_record("a", &["m"], &[vec![0.5]]);
        a.save(&dir.path().join("record.json")).unwrap();
        let cell = dir.path().join("cell-1");
        fs::create_dir(&cell).unwrap();
        let b = fake_record("b", &["m"], &[vec![0.25]]);
        b.save(&cell.join("record.json")).unwrap();
        let bad = dir.path().join("cell-2");
        fs::create_dir(&bad).unwrap();
        fs::write(bad.join("record.json"), "not json").unwrap();

        let (records, problems) = scan_records(dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].name, "a");
        assert_eq!(records[1].name, "b");
        assert_eq!(problems.len(), 1);
        assert!(problems[0].contains("cell-2"), "{:?}", problems[0]);

        let empty = tempfile::tempdir().unwrap();
        assert!(scan_records(empty.path()).is_err());
    }
}
