//! Report files: training history, metric tables, rendered confusion
//! matrices, and cross-validation summaries. CSVs use `.` decimals, LF
//! endings, six decimal places.

use std::fs;
use std::path::Path;

use densepipe_core::error::{Error, Result};
use densepipe_core::metrics::{ConfusionMatrix, MetricsReport};
use densepipe_core::train::EpochRecord;

#[derive(Debug, Clone)]
pub struct RunReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub seconds: f64,
    pub config_echo: String,
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for (i, r) in history.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            f6(r.train_loss),
            f6(r.train_acc),
            f6(r.val_loss),
            f6(r.val_acc)
        ));
    }
    s
}

pub fn metrics_csv(m: &MetricsReport, cm: &ConfusionMatrix) -> String {
    format!(
        "accuracy,precision,recall,specificity,f1,tp,fn,fp,tn\n{},{},{},{},{},{},{},{},{}\n",
        f6(m.accuracy),
        f6(m.precision),
        f6(m.recall),
        f6(m.specificity),
        f6(m.f1),
        cm.true_pos,
        cm.false_neg,
        cm.false_pos,
        cm.true_neg
    )
}

/// Rows = actual, columns = predicted, female first.
pub fn confusion_text(cm: &ConfusionMatrix) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<15}{:>12}{:>12}\n",
        "", "pred_female", "pred_male"
    ));
    s.push_str(&format!(
        "{:<15}{:>12}{:>12}\n",
        "actual_female", cm.true_pos, cm.false_neg
    ));
    s.push_str(&format!(
        "{:<15}{:>12}{:>12}\n",
        "actual_male", cm.false_pos, cm.true_neg
    ));
    s
}

fn metrics_lines(m: &MetricsReport) -> String {
    let flag = |u: bool| if u { " (undefined, reported as 0)" } else { "" };
    format!(
        "accuracy    = {}\nprecision   = {}{}\nrecall      = {}{}\nspecificity = {}{}\nf1          = {}{}\n",
        f6(m.accuracy),
        f6(m.precision),
        flag(m.precision_undefined),
        f6(m.recall),
        flag(m.recall_undefined),
        f6(m.specificity),
        flag(m.specificity_undefined),
        f6(m.f1),
        flag(m.f1_undefined)
    )
}

pub fn summary_text(r: &RunReport) -> String {
    let mut s = String::new();
    s.push_str("== run summary ==\n");
    s.push_str(&format!("epochs trained : {}\n", r.history.len()));
    s.push_str(&format!("best epoch     : {}\n", r.best_epoch + 1));
    if let Some(best) = r.history.get(r.best_epoch) {
        s.push_str(&format!("best val loss  : {}\n", f6(best.val_loss)));
    }
    s.push_str(&format!("elapsed        : {} s\n\n", f6(r.seconds)));
    s.push_str("== test metrics ==\n");
    s.push_str(&metrics_lines(&r.metrics));
    s.push('\n');
    s.push_str("== confusion matrix ==\n");
    s.push_str(&confusion_text(&r.confusion));
    s.push('\n');
    s.push_str("== config ==\n");
    s.push_str(&r.config_echo);
    s
}

/// Write history.csv, metrics.csv, confusion.txt and report.txt.
pub fn write_run_report(out_dir: &Path, r: &RunReport) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    write(&out_dir.join("history.csv"), &history_csv(&r.history))?;
    write(
        &out_dir.join("metrics.csv"),
        &metrics_csv(&r.metrics, &r.confusion),
    )?;
    write(&out_dir.join("confusion.txt"), &confusion_text(&r.confusion))?;
    write(&out_dir.join("report.txt"), &summary_text(r))
}

// ---------------------------------------------------------------------------
// cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct CrossvalReport {
    pub folds: Vec<FoldResult>,
    pub seconds: f64,
    pub config_echo: String,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn crossval_csv(r: &CrossvalReport) -> String {
    let mut s = String::from("fold,train_size,val_size,accuracy,precision,recall,specificity,f1\n");
    let cols = |m: &MetricsReport| [m.accuracy, m.precision, m.recall, m.specificity, m.f1];
    for f in &r.folds {
        let v = cols(&f.metrics);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.fold + 1,
            f.train_size,
            f.val_size,
            f6(v[0]),
            f6(v[1]),
            f6(v[2]),
            f6(v[3]),
            f6(v[4])
        ));
    }
    for (name, pick) in [("mean", 0usize), ("std", 1usize)] {
        let mut row = format!("{name},,");
        for i in 0..5 {
            let series: Vec<f64> = r.folds.iter().map(|f| cols(&f.metrics)[i]).collect();
            let (mean, std) = mean_std(&series);
            row.push(',');
            row.push_str(&f6(if pick == 0 { mean } else { std }));
        }
        row.push('\n');
        s.push_str(&row);
    }
    s
}

pub fn write_crossval_report(out_dir: &Path, r: &CrossvalReport) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    write(&out_dir.join("folds.csv"), &crossval_csv(r))?;
    let mut s = String::from("== cross-validation ==\n");
    s.push_str(&format!("folds   : {}\n", r.folds.len()));
    s.push_str(&format!("elapsed : {} s\n\n", f6(r.seconds)));
    s.push_str(&crossval_csv(r));
    s.push_str("\n== config ==\n");
    s.push_str(&r.config_echo);
    write(&out_dir.join("report.txt"), &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_metrics() -> (ConfusionMatrix, MetricsReport) {
        let cm = ConfusionMatrix {
            true_pos: 50,
            false_neg: 10,
            false_pos: 5,
            true_neg: 35,
        };
        let m = densepipe_core::metrics::metrics(&cm).unwrap();
        (cm, m)
    }

    #[test]
    fn history_rows_match_epochs() {
        let hist = vec![
            EpochRecord {
                train_loss: 0.5,
                train_acc: 0.75,
                val_loss: 0.6,
                val_acc: 0.7,
            };
            3
        ];
        let csv = history_csv(&hist);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert!(csv.contains("1,0.500000,0.750000,0.600000,0.700000"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn metrics_csv_prints_module_values() {
        let (cm, m) = sample_metrics();
        let csv = metrics_csv(&m, &cm);
        let row = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], format!("{:.6}", m.accuracy));
        assert_eq!(fields[4], format!("{:.6}", m.f1));
        assert_eq!(&fields[5..], &["50", "10", "5", "35"]);
    }

    #[test]
    fn confusion_orientation_female_first() {
        let (cm, _) = sample_metrics();
        let txt = confusion_text(&cm);
        let lines: Vec<&str> = txt.lines().collect();
        assert!(lines[0].contains("pred_female"));
        assert!(lines[0].find("pred_female").unwrap() < lines[0].find("pred_male").unwrap());
        assert!(lines[1].starts_with("actual_female"));
        assert!(lines[2].starts_with("actual_male"));
        // TP top-left, TN bottom-right
        assert!(lines[1].contains("50") && lines[1].contains("10"));
        assert!(lines[2].contains('5') && lines[2].contains("35"));
    }

    #[test]
    fn crossval_mean_and_std_rows() {
        let (_, m) = sample_metrics();
        let mut m2 = m;
        m2.accuracy = m.accuracy + 0.1;
        let r = CrossvalReport {
            folds: vec![
                FoldResult {
                    fold: 0,
                    train_size: 8,
                    val_size: 2,
                    metrics: m,
                },
                FoldResult {
                    fold: 1,
                    train_size: 8,
                    val_size: 2,
                    metrics: m2,
                },
            ],
            seconds: 1.0,
            config_echo: String::new(),
        };
        let csv = crossval_csv(&r);
        let mean_line = csv.lines().find(|l| l.starts_with("mean")).unwrap();
        let std_line = csv.lines().find(|l| l.starts_with("std")).unwrap();
        let mean_acc: f64 = mean_line.split(',').nth(3).unwrap().parse().unwrap();
        let std_acc: f64 = std_line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((mean_acc - (m.accuracy + 0.05)).abs() < 1e-6);
        assert!((std_acc - 0.05).abs() < 1e-6);
    }
}
