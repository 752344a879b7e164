//! Metric tables: rows are metric names, columns are model variants.

use std::path::Path;

use anyhow::Context;

use mhcn_core::eval::EvalReport;

use crate::Failure;

pub struct MetricTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricTable {
    /// One column per labeled report. Rows cover the overall mean and the
    /// cold-start segment for every cutoff. All reports must share the same
    /// cutoff list (they come from the same evaluation config).
    pub fn from_reports(labeled: &[(String, &EvalReport)]) -> Self {
        assert!(!labeled.is_empty(), "no reports to tabulate");
        let columns: Vec<String> = labeled.iter().map(|(label, _)| label.clone()).collect();
        let first = labeled[0].1;
        for (_, report) in labeled {
            assert_eq!(report.mean.len(), first.mean.len(), "cutoff lists differ");
        }

        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        for idx in 0..first.mean.len() {
            let k = first.mean[idx].k;
            let col = |f: &dyn Fn(&EvalReport) -> f64| -> Vec<f64> {
                labeled.iter().map(|(_, r)| f(r)).collect()
            };
            rows.push((format!("precision@{k}"), col(&|r| r.mean[idx].precision)));
            rows.push((format!("recall@{k}"), col(&|r| r.mean[idx].recall)));
            rows.push((format!("ndcg@{k}"), col(&|r| r.mean[idx].ndcg)));
        }
        for idx in 0..first.cold_start_mean.len() {
            let k = first.cold_start_mean[idx].k;
            let col = |f: &dyn Fn(&EvalReport) -> f64| -> Vec<f64> {
                labeled.iter().map(|(_, r)| f(r)).collect()
            };
            rows.push((format!("cold_precision@{k}"), col(&|r| r.cold_start_mean[idx].precision)));
            rows.push((format!("cold_recall@{k}"), col(&|r| r.cold_start_mean[idx].recall)));
            rows.push((format!("cold_ndcg@{k}"), col(&|r| r.cold_start_mean[idx].ndcg)));
        }
        Self { columns, rows }
    }

    /// CSV with a `metric` column followed by one column per variant.
    /// Values keep full precision so the file round-trips exactly.
    pub fn write_csv(&self, path: &Path) -> Result<(), Failure> {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["metric".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).context("writing CSV header")?;
        for (name, values) in &self.rows {
            let mut record = vec![name.clone()];
            record.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&record).context("writing CSV row")?;
        }
        w.flush().with_context(|| format!("flushing {}", path.display()))?;
        Ok(())
    }

    pub fn print(&self) {
        let mut headers = vec!["metric".to_owned()];
        headers.extend(self.columns.iter().cloned());
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(name, values)| {
                let mut row = vec![name.clone()];
                row.extend(values.iter().map(|v| format!("{v:.5}")));
                row
            })
            .collect();
        print_text_table(&headers, &rows);
    }
}

/// Print an aligned two-space-gutter table.
pub fn print_text_table(headers: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let print_row = |cells: &[String]| {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(&format!("{cell:<width$}", width = widths[i]));
        }
        println!("{}", line.trim_end());
    };
    print_row(headers);
    for row in rows {
        print_row(row);
    }
}
