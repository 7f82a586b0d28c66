//! Pass/fail checks over AUC tables and benchmark reports.

use std::fmt;

use sslkit::eval::{AucTable, BenchReport};
use sslkit::Method;

use crate::config::Assertions;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Sorted distinct values of one table axis.
fn axis(table: &AucTable, key: impl Fn(&sslkit::eval::AucCell) -> f64) -> Vec<f64> {
    let mut v: Vec<f64> = table.cells.iter().map(key).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Inversions of `method`'s AUC along SNR (should rise) and RT60 (should fall).
///
/// An inversion is an adjacent pair of conditions that moves the wrong way.
/// Missing AUCs count as inversions.
pub fn trend_inversions(table: &AucTable, method: Method) -> (usize, usize) {
    let snrs = axis(table, |c| c.snr_db);
    let rts = axis(table, |c| c.rt60);
    let auc = |s: f64, r: f64| table.auc(s, r, method);
    let wrong = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => b < a,
        _ => true,
    };
    let mut along_snr = 0;
    for &r in &rts {
        for w in snrs.windows(2) {
            along_snr += usize::from(wrong(auc(w[0], r), auc(w[1], r)));
        }
    }
    let mut along_rt60 = 0;
    for &s in &snrs {
        for w in rts.windows(2) {
            // Falling AUC with more reverberation is the expected direction.
            along_rt60 += usize::from(wrong(auc(s, w[1]), auc(s, w[0])));
        }
    }
    (along_snr, along_rt60)
}

/// Every enabled AUC assertion.
pub fn check_table(table: &AucTable, assertions: &Assertions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if assertions.complete {
        let incomplete = table.cells.iter().filter(|c| !c.is_complete()).count();
        out.push(check("complete", incomplete == 0, format!("{incomplete} incomplete conditions")));
    }
    if assertions.trends {
        for &m in &table.methods {
            let (snr, rt60) = trend_inversions(table, m);
            out.push(check(
                format!("trends {m}"),
                snr <= 1 && rt60 <= 1,
                format!("{snr} inversions along SNR, {rt60} along RT60"),
            ));
        }
    }
    for f in &assertions.min_auc {
        let got = table.auc(f.snr_db, f.rt60, f.method);
        out.push(check(
            format!("min auc {} at {} dB, {} s", f.method, f.snr_db, f.rt60),
            got.is_some_and(|a| a >= f.auc),
            format!("{} (need >= {})", fmt_auc(got), f.auc),
        ));
    }
    for m in &assertions.margins {
        let a = table.auc(m.snr_db, m.rt60, m.better);
        let b = table.auc(m.snr_db, m.rt60, m.worse);
        let passed = matches!((a, b), (Some(a), Some(b)) if a - b >= m.margin);
        out.push(check(
            format!("margin {} over {} at {} dB, {} s", m.better, m.worse, m.snr_db, m.rt60),
            passed,
            format!("{} vs {} (need >= {})", fmt_auc(a), fmt_auc(b), m.margin),
        ));
    }
    out
}

/// DSVD-PHAT over GSVD-MUSIC mean per-frame time.
pub fn speedup(report: &BenchReport) -> Option<f64> {
    let fast = report.timing(Method::DsvdPhat)?.mean_ms;
    let slow = report.timing(Method::GsvdMusic)?.mean_ms;
    (fast > 0.0).then(|| slow / fast)
}

/// Every enabled timing assertion.
pub fn check_bench(report: &BenchReport, assertions: &Assertions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if let Some(min) = assertions.min_speedup {
        let s = speedup(report);
        out.push(check(
            "speedup",
            s.is_some_and(|s| s >= min),
            format!("{} (need >= {min})", s.map_or("n/a".into(), |s| format!("{s:.1}x"))),
        ));
    }
    if let Some(max) = assertions.max_frame_ms {
        let t = report.timing(Method::DsvdPhat).map(|t| t.mean_ms);
        out.push(check(
            "frame time",
            t.is_some_and(|t| t < max),
            format!("{} (need < {max} ms)", t.map_or("n/a".into(), |t| format!("{t:.4} ms"))),
        ));
    }
    out
}

fn fmt_auc(a: Option<f64>) -> String {
    a.map_or("n/a".into(), |a| format!("{a:.3}"))
}
