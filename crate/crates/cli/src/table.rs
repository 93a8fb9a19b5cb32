//! Comparison table across runs, as aligned text and as CSV.

use std::fmt;

use relnet::eval::EvalReport;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub name: String,
    pub test_sims: usize,
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub mse_10: Option<f64>,
    pub mse_20: Option<f64>,
    pub baseline_10: Option<f64>,
    pub baseline_20: Option<f64>,
}

impl ReportRow {
    pub fn from_report(r: &EvalReport) -> Self {
        let model = |h| r.mse_at(h).map(|m| m.model);
        let base = |h| r.mse_at(h).map(|m| m.baseline);
        Self {
            task: r.task_id.map_or_else(|| "custom".to_string(), |id| id.to_string()),
            name: r.task_name.clone(),
            test_sims: r.test_sims,
            accuracy: r.accuracy,
            accuracy_std: r.accuracy_std,
            mse_10: model(10),
            mse_20: model(20),
            baseline_10: base(10),
            baseline_20: base(20),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

const HEADER: [&str; 9] = [
    "task",
    "name",
    "test_sims",
    "accuracy",
    "accuracy_std",
    "mse_10",
    "mse_20",
    "baseline_10",
    "baseline_20",
];

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(HEADER).expect("in-memory write");
        }
        for row in &self.rows {
            w.serialize(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }

    pub fn from_csv(text: &str) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        anyhow::ensure!(header == HEADER, "expected columns {}", HEADER.join(","));
        let rows = r.deserialize().collect::<Result<Vec<ReportRow>, _>>()?;
        Ok(Self { rows })
    }
}

fn sci(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"))
}

impl fmt::Display for ReportTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        writeln!(
            f,
            "{:<6} {:<name_w$} {:>18} {:>10} {:>10} {:>10} {:>10}",
            "task", "name", "accuracy (%)", "MSE@10", "MSE@20", "static@10", "static@20"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:<name_w$} {:>18} {:>10} {:>10} {:>10} {:>10}",
                r.task,
                r.name,
                format!("{:.3} ± {:.3}", r.accuracy, r.accuracy_std),
                sci(r.mse_10),
                sci(r.mse_20),
                sci(r.baseline_10),
                sci(r.baseline_20)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(task: &str, mse: Option<f64>) -> ReportRow {
        ReportRow {
            task: task.into(),
            name: "5 particles, 2 link types".into(),
            test_sims: 200,
            accuracy: 93.123456789,
            accuracy_std: 0.1 + 0.2,
            mse_10: mse,
            mse_20: mse.map(|m| m * 3.0),
            baseline_10: Some(1.0 / 3.0),
            baseline_20: None,
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let t = ReportTable {
            rows: vec![row("1", Some(1.102e-6)), row("custom", None)],
        };
        let text = t.to_csv();
        let back = ReportTable::from_csv(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn text_table_has_a_line_per_row() {
        let t = ReportTable {
            rows: vec![row("4", Some(0.5)), row("5", Some(0.6))],
        };
        assert_eq!(t.to_string().lines().count(), 3);
    }

    #[test]
    fn wrong_columns_are_rejected() {
        assert!(ReportTable::from_csv("a,b\n1,2\n").is_err());
    }
}
