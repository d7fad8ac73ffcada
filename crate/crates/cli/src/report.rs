//! Rendering of the consolidated results table.

use std::path::{Path, PathBuf};

use anyhow::Result;
use cmidebias_core::experiment::{read_consolidated_csv, ResultRow, CONSOLIDATED_CSV};

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Format {
    Text,
    Markdown,
    Csv,
}

fn cell(row: &ResultRow, i: usize) -> String {
    match (row.metrics[i], row.drift_pct[i]) {
        (Some(m), Some(d)) => format!("{m:.3} ({d:+.1}%)"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "n/a".to_string(),
    }
}

pub fn render(rows: &[ResultRow], format: Format) -> String {
    const HEADER: [&str; 5] = ["scenario", "AUC", "Precision", "Recall", "F1"];
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.scenario.clone()];
            line.extend((0..4).map(|i| cell(r, i)));
            line
        })
        .collect();
    match format {
        Format::Markdown => {
            let mut out = format!("| {} |\n|{}\n", HEADER.join(" | "), "---|".repeat(HEADER.len()));
            for line in &table {
                out.push_str(&format!("| {} |\n", line.join(" | ")));
            }
            out
        }
        Format::Text | Format::Csv => {
            let mut widths: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
            for line in &table {
                for (w, c) in widths.iter_mut().zip(line) {
                    *w = (*w).max(c.len());
                }
            }
            let fmt = |cells: Vec<&str>| {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
            };
            let mut out = fmt(HEADER.to_vec()) + "\n";
            for line in &table {
                out.push_str(&fmt(line.iter().map(String::as_str).collect()));
                out.push('\n');
            }
            out
        }
    }
}

pub fn print(input: &Path, format: Format) -> Result<()> {
    let path: PathBuf = if input.is_dir() {
        input.join(CONSOLIDATED_CSV)
    } else {
        input.to_path_buf()
    };
    if let Format::Csv = format {
        print!("{}", std::fs::read_to_string(&path)?);
        return Ok(());
    }
    print!("{}", render(&read_consolidated_csv(&path)?, format));
    Ok(())
}
