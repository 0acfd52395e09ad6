//! CSV and JSON output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use less_core::influence::Ranked;
use less_core::InfluenceScore;
use serde::Serialize;

use crate::pipeline::RunReport;

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// One row per candidate: id, aggregate, then one column per subtask.
pub fn write_scores_csv(path: impl AsRef<Path>, scores: &[InfluenceScore]) -> Result<()> {
    let path = path.as_ref();
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let n = scores.first().map_or(0, |s| s.per_subtask.len());
    let mut header = vec!["example_id".to_string(), "aggregate".to_string()];
    header.extend((0..n).map(|j| format!("subtask_{j}")));
    w.write_record(&header)?;
    for s in scores {
        let mut row = vec![s.example_id().to_string(), s.aggregate().to_string()];
        row.extend(s.per_subtask.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per method: mean val and test loss, then per-subtask metrics.
pub fn write_summary_csv(path: impl AsRef<Path>, report: &RunReport) -> Result<()> {
    let path = path.as_ref();
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec![
        "method".to_string(),
        "target_model".to_string(),
        "mean_val_loss".to_string(),
        "mean_test_loss".to_string(),
        "mean_selected_len".to_string(),
    ];
    for name in &report.subtasks {
        header.push(format!("{name}_val_loss"));
        header.push(format!("{name}_loss"));
        header.push(format!("{name}_token_acc"));
        header.push(format!("{name}_exact"));
    }
    w.write_record(&header)?;
    for m in &report.summary {
        let mut row = vec![
            m.method.clone(),
            m.target_model.clone(),
            m.mean_val_loss.to_string(),
            m.mean_test_loss.to_string(),
            m.mean_selected_len.to_string(),
        ];
        for j in 0..report.subtasks.len() {
            row.push(m.subtask_val_loss[j].to_string());
            row.push(m.subtask_test_loss[j].to_string());
            row.push(m.subtask_token_accuracy[j].to_string());
            row.push(m.subtask_exact_match[j].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table for the terminal.
pub fn format_summary(report: &RunReport) -> String {
    let mut out = format!(
        "{:<12} {:<16} {:>10} {:>10}",
        "method", "target", "val_loss", "test_loss"
    );
    for name in &report.subtasks {
        out.push_str(&format!(" {:>14}", name));
    }
    out.push('\n');
    for m in &report.summary {
        out.push_str(&format!(
            "{:<12} {:<16} {:>10.4} {:>10.4}",
            m.method, m.target_model, m.mean_val_loss, m.mean_test_loss
        ));
        for l in &m.subtask_test_loss {
            out.push_str(&format!(" {:>14.4}", l));
        }
        out.push('\n');
    }
    out
}
