//! Plain-text result tables.

use std::fmt::Write;

use kappa_sphere::latency::LatencyReport;
use kappa_sphere::pipeline::{MatchEvaluation, MethodEntry, MethodOutcome, QueryEvaluation};

fn ks_of(methods: &[MethodEntry]) -> Vec<usize> {
    methods
        .iter()
        .find_map(|m| match &m.outcome {
            MethodOutcome::Ok { reports } => Some(reports.iter().map(|r| r.k).collect()),
            MethodOutcome::Unsupported { .. } => None,
        })
        .unwrap_or_default()
}

fn ece_rows(s: &mut String, methods: &[MethodEntry], ks: &[usize]) {
    for m in methods {
        let _ = write!(s, "{:<16}", m.method.name());
        match &m.outcome {
            MethodOutcome::Ok { .. } => {
                for &k in ks {
                    match m.ece(k) {
                        Some(e) => {
                            let _ = write!(s, "{e:>10.4}");
                        }
                        None => s.push_str(&format!("{:>10}", "-")),
                    }
                }
                s.push('\n');
            }
            MethodOutcome::Unsupported { reason } => {
                let _ = writeln!(s, "  unsupported: {reason}");
            }
        }
    }
}

pub fn query_table(r: &QueryEvaluation) -> String {
    let mut ks: Vec<usize> = r.recall.keys().copied().collect();
    if ks.is_empty() {
        ks = ks_of(&r.methods);
    }
    let mut s = String::new();
    let _ = writeln!(s, "queries: {}", r.num_queries);
    let _ = write!(s, "{:<16}", "");
    for k in &ks {
        let _ = write!(s, "{:>10}", format!("R@{k}"));
    }
    s.push('\n');
    let _ = write!(s, "{:<16}", "recall");
    for k in &ks {
        let _ = write!(s, "{:>10.4}", r.recall[k]);
    }
    s.push('\n');
    let _ = write!(s, "{:<16}", "method");
    for k in &ks {
        let _ = write!(s, "{:>10}", format!("ECE@{k}"));
    }
    s.push('\n');
    ece_rows(&mut s, &r.methods, &ks);
    s
}

pub fn match_table(r: &MatchEvaluation) -> String {
    let ks = ks_of(&r.methods);
    let mut s = String::new();
    let _ = writeln!(s, "queries: {} (match level)", r.num_queries);
    let _ = write!(s, "{:<16}", "method");
    for k in &ks {
        let _ = write!(s, "{:>10}", format!("ECE@{k}"));
    }
    s.push('\n');
    ece_rows(&mut s, &r.methods, &ks);
    s
}

pub fn bench_table(r: &LatencyReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "inference latency (ms), mean of {} runs after {} warm-up runs",
        r.config.runs, r.config.warmup
    );
    let _ = writeln!(s, "{:<20}{:>10}{:>10}{:>10}", "path", "mean", "std", "min");
    for (name, t) in [("descriptor", &r.descriptor_path), ("descriptor + kappa", &r.kappa_path)] {
        let _ = writeln!(s, "{name:<20}{:>10.3}{:>10.3}{:>10.3}", t.mean_ms, t.std_ms, t.min_ms);
    }
    let _ = writeln!(s, "kappa overhead: {:+.1}%", 100.0 * r.overhead);
    s
}
