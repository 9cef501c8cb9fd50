//! Text renderings of experiment results.

use std::fmt::Write;

use crate::experiment::AblationRow;
use crate::metrics::{EpisodeReport, SummaryRow};

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Aligned table: one row per (method, shots), metrics in percent.
pub fn summary_table(rows: &[SummaryRow], digest: &str) -> String {
    let mut out = String::new();
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    if let Some(first) = rows.first() {
        let _ = writeln!(out, "scenario: {}", first.scenario);
    }
    let _ = writeln!(out, "config: {digest}");
    let _ = writeln!(out, "{:width$}  {:>4}  {:>6}  {:>6}  {:>6}  {:>10}  {:>8}", "method", "K", "maF1", "miF1", "UA", "annotators", "episodes");
    for r in rows {
        let _ = writeln!(
            out,
            "{:width$}  {:>4}  {:>6}  {:>6}  {:>6}  {:>10}  {:>8}",
            r.method,
            r.shots,
            pct(r.mean.ma_f1),
            pct(r.mean.mi_f1),
            pct(r.mean.ua),
            r.annotators,
            r.episodes
        );
    }
    out
}

/// `method,scenario,shots,maF1,miF1,UA` rows, metrics in percent.
pub fn shot_sweep_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("method,scenario,shots,maF1,miF1,UA\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4}",
            r.method,
            r.scenario,
            r.shots,
            100.0 * r.mean.ma_f1,
            100.0 * r.mean.mi_f1,
            100.0 * r.mean.ua
        );
    }
    out
}

/// One JSON object per line.
pub fn episodes_jsonl(reports: &[EpisodeReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("reports always serialize") + "\n")
        .collect()
}

pub fn parse_episodes(text: &str) -> serde_json::Result<Vec<EpisodeReport>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Toggle grid with an `x` under each enabled technique.
pub fn ablation_table(rows: &[AblationRow], digest: &str) -> String {
    let mark = |on: bool| if on { "x" } else { "" };
    let mut out = format!("config: {digest}\n");
    let _ = writeln!(out, "{:>4} {:>5} {:>3} {:>5}  {:>6}  {:>6}  {:>6}", "INI", "CSMT", "DA", "LSLR", "maF1", "miF1", "UA");
    for r in rows {
        let t = r.toggles;
        let m = r.summary.mean;
        let _ = writeln!(
            out,
            "{:>4} {:>5} {:>3} {:>5}  {:>6}  {:>6}  {:>6}",
            mark(t.ini),
            mark(t.csmt),
            mark(t.da),
            mark(t.lslr),
            pct(m.ma_f1),
            pct(m.mi_f1),
            pct(m.ua)
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("ini,csmt,da,lslr,maF1,miF1,UA\n");
    for r in rows {
        let t = r.toggles;
        let m = r.summary.mean;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4}",
            t.ini,
            t.csmt,
            t.da,
            t.lslr,
            100.0 * m.ma_f1,
            100.0 * m.mi_f1,
            100.0 * m.ua
        );
    }
    out
}
