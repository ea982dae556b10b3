use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::StepKey;
use crate::verify::Violation;

/// Parses a newline-delimited report file; blank lines are skipped.
pub fn parse_reports(text: &str) -> Result<Vec<Violation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn render_violation(v: &Violation) -> String {
    let records: Vec<String> = v
        .example
        .records
        .iter()
        .map(|r| format!("p{}/t{} {}", r.pid, r.tid, r.source))
        .collect();
    format!("{} <- {}", v.summary, records.join(", "))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub count: u64,
    pub first_step: StepKey,
}

impl Group {
    fn add(&mut self, step: StepKey) {
        self.first_step = match (self.count, self.first_step, step) {
            (0, _, s) => s,
            (_, Some(a), Some(b)) => Some(a.min(b)),
            (_, a, b) => a.or(b),
        };
        self.count += 1;
    }
}

/// Violations grouped by invariant and by the APIs and variables involved.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub total: u64,
    pub by_invariant: BTreeMap<String, Group>,
    pub by_target: BTreeMap<String, Group>,
}

impl ReportSummary {
    pub fn of(reports: &[Violation]) -> Self {
        let mut s = ReportSummary::default();
        for v in reports {
            s.total += 1;
            s.by_invariant.entry(v.invariant.clone()).or_default().add(v.detection_step);
            for t in &v.targets {
                s.by_target.entry(t.clone()).or_default().add(v.detection_step);
            }
        }
        s
    }
}

fn step_text(s: StepKey) -> String {
    s.map_or_else(|| "-".to_string(), |s| s.to_string())
}

pub fn render_summary(s: &ReportSummary) -> String {
    if s.total == 0 {
        return "no violations\n".to_string();
    }
    let mut out = String::new();
    let _ = writeln!(out, "{} violations", s.total);
    let _ = writeln!(out, "\nby API / variable:");
    let mut targets: Vec<_> = s.by_target.iter().collect();
    targets.sort_by(|a, b| b.1.count.cmp(&a.1.count).then(a.0.cmp(b.0)));
    for (t, g) in targets {
        let _ = writeln!(out, "  {:>6}  first step {:>4}  {t}", g.count, step_text(g.first_step));
    }
    let _ = writeln!(out, "\nby invariant:");
    let mut invs: Vec<_> = s.by_invariant.iter().collect();
    invs.sort_by(|a, b| b.1.count.cmp(&a.1.count).then(a.0.cmp(b.0)));
    for (id, g) in invs {
        let _ = writeln!(out, "  {:>6}  first step {:>4}  {id}", g.count, step_text(g.first_step));
    }
    out
}
