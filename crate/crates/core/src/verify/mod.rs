//! Checking trace streams against deployed invariants.

mod manifest;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, Warning};
use crate::invariant::Invariant;
use crate::precondition::Clause;
use crate::relation::{
    arg_example, consistent_examples, output_example, span_example, window_example, Example, Relation, RelationKind,
};
use crate::trace::{Run, StepKey, TraceRecord};
use crate::units::{SpanUnit, StepUnit, Unit, UnitCollector, META_PREFIX};
use crate::value::Value;

pub use manifest::{required_descriptors, Manifest, VarSelector};
pub use report::{parse_reports, render_summary, render_violation, ReportSummary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Units are checked as soon as they are complete.
    #[default]
    Online,
    /// Everything is checked at the end of the stream.
    Batch,
}

/// A failing example on which an invariant's precondition held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub relation: RelationKind,
    /// Index and content of the first satisfied precondition clause.
    pub clause_index: usize,
    pub clause: Clause,
    /// Step of the offending unit; this is when the report is raised.
    pub detection_step: StepKey,
    /// Meta variables of the first offending record.
    pub meta: BTreeMap<String, Value>,
    /// APIs and variables the invariant is about.
    pub targets: Vec<String>,
    pub example: Example,
    pub summary: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantTally {
    /// Every failing example with a satisfied precondition.
    pub occurrences: u64,
    /// After per-unit deduplication.
    pub reported: u64,
    pub first_step: StepKey,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub records: u64,
    pub invariants: usize,
    pub violations: u64,
    pub per_invariant: BTreeMap<String, InvariantTally>,
    pub warnings: Vec<Warning>,
}

struct Deployed {
    inv: Invariant,
    rel: Relation,
    targets: Vec<String>,
}

fn targets(rel: &Relation) -> Vec<String> {
    let mut out: BTreeSet<String> = BTreeSet::new();
    for d in rel.descriptors() {
        match d {
            crate::descriptor::Descriptor::Api(a) => out.insert(a.func),
            crate::descriptor::Descriptor::Var(v) => out.insert(format!("{}.{}", v.var_type, v.attr)),
        };
    }
    out.into_iter().collect()
}

/// Incremental checker. Feed records in per-thread order; reports come out
/// through the sink as units complete.
pub struct Checker {
    deployed: Vec<Deployed>,
    /// Span invariants by API name.
    by_func: BTreeMap<String, Vec<usize>>,
    step_invs: Vec<usize>,
    collector: UnitCollector,
    seen: HashSet<(usize, StepKey, String)>,
    summary: CheckSummary,
    units: Vec<Unit>,
}

impl Checker {
    /// `expected_pids` lets the online barrier wait for processes that have
    /// not produced a record yet.
    pub fn new(invs: &[Invariant], mode: Mode, expected_pids: BTreeSet<u64>) -> Result<Self> {
        let mut deployed = Vec::with_capacity(invs.len());
        let mut by_func: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut step_invs = Vec::new();
        for (i, inv) in invs.iter().enumerate() {
            let rel = inv.to_relation()?;
            match &rel {
                Relation::EventContain { parent: api, .. } | Relation::ApiOutput { api, .. } => {
                    by_func.entry(api.func.clone()).or_default().push(i)
                }
                _ => step_invs.push(i),
            }
            deployed.push(Deployed {
                targets: targets(&rel),
                inv: inv.clone(),
                rel,
            });
        }
        Ok(Checker {
            deployed,
            by_func,
            step_invs,
            collector: match mode {
                Mode::Online => UnitCollector::online(expected_pids),
                Mode::Batch => UnitCollector::batch(),
            },
            seen: HashSet::new(),
            summary: CheckSummary {
                invariants: invs.len(),
                ..Default::default()
            },
            units: Vec::new(),
        })
    }

    pub fn push(&mut self, r: &TraceRecord, sink: &mut dyn FnMut(Violation)) -> Result<()> {
        self.summary.records += 1;
        self.collector.push(r, &mut self.units)?;
        self.drain(sink)
    }

    pub fn finish(mut self, sink: &mut dyn FnMut(Violation)) -> Result<CheckSummary> {
        let collector = std::mem::replace(&mut self.collector, UnitCollector::batch());
        let warnings = collector.finish(&mut self.units);
        self.drain(sink)?;
        self.summary.warnings = warnings;
        Ok(self.summary)
    }

    fn drain(&mut self, sink: &mut dyn FnMut(Violation)) -> Result<()> {
        let units = std::mem::take(&mut self.units);
        for u in &units {
            match u {
                Unit::Span(s) => self.check_span(s, sink)?,
                Unit::Step(s) => self.check_step(s, sink)?,
            }
        }
        Ok(())
    }

    fn check_span(&mut self, span: &SpanUnit, sink: &mut dyn FnMut(Violation)) -> Result<()> {
        let Some(idx) = self.by_func.get(&span.func) else {
            return Ok(());
        };
        for &i in &idx.clone() {
            let rel = &self.deployed[i].rel;
            let ex = match rel {
                Relation::EventContain { .. } => span_example(rel, span),
                _ => output_example(rel, span),
            };
            if let Some(ex) = ex {
                self.judge(i, ex?, sink);
            }
        }
        Ok(())
    }

    fn check_step(&mut self, unit: &StepUnit, sink: &mut dyn FnMut(Violation)) -> Result<()> {
        for &i in &self.step_invs.clone() {
            let rel = self.deployed[i].rel.clone();
            let mut found = Vec::new();
            match &rel {
                Relation::Consistent { .. } => consistent_examples(&rel, unit, &mut |e| found.push(e))?,
                Relation::ApiSequence { .. } => window_example(&rel, unit, &mut |e| found.push(e))?,
                Relation::ApiArg { .. } => {
                    if let Some(e) = arg_example(&rel, unit) {
                        found.push(e?);
                    }
                }
                _ => {}
            }
            for e in found {
                self.judge(i, e, sink);
            }
        }
        Ok(())
    }

    fn judge(&mut self, i: usize, ex: Example, sink: &mut dyn FnMut(Violation)) {
        if ex.is_passing() {
            return;
        }
        let d = &self.deployed[i];
        let Some(ci) = d.inv.precondition.satisfied_clause(&ex.records) else {
            return;
        };
        let tally = self.summary.per_invariant.entry(d.inv.id.clone()).or_default();
        tally.occurrences += 1;
        if !self.seen.insert((i, ex.step, ex.unit.clone())) {
            return;
        }
        tally.reported += 1;
        if tally.reported == 1 {
            tally.first_step = ex.step;
        }
        self.summary.violations += 1;
        let meta = ex
            .records
            .first()
            .map(|r| {
                r.fields
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix(META_PREFIX).map(|k| (k.to_string(), v.clone())))
                    .collect()
            })
            .unwrap_or_default();
        let clause = d.inv.precondition.any[ci].clone();
        let step = ex.step.map_or("-".to_string(), |s| s.to_string());
        let unit = if ex.unit.is_empty() { "all ranks" } else { ex.unit.as_str() };
        let summary = format!("step {step} [{unit}]: {} violated under {clause}", d.inv.id);
        sink(Violation {
            invariant: d.inv.id.clone(),
            relation: d.inv.relation,
            clause_index: ci,
            clause,
            detection_step: ex.step,
            meta,
            targets: d.targets.clone(),
            example: ex,
            summary,
        });
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckOutcome {
    pub violations: Vec<Violation>,
    pub summary: CheckSummary,
}

/// Checks a stream of records. Records from different processes may come
/// in any interleaving; within a thread they must be in order.
pub fn check_stream<'a>(
    invs: &[Invariant],
    records: impl IntoIterator<Item = &'a TraceRecord>,
    mode: Mode,
    expected_pids: BTreeSet<u64>,
) -> Result<CheckOutcome> {
    let mut checker = Checker::new(invs, mode, expected_pids)?;
    let mut violations = Vec::new();
    let mut sink = |v| violations.push(v);
    for r in records {
        checker.push(r, &mut sink)?;
    }
    let summary = checker.finish(&mut sink)?;
    Ok(CheckOutcome { violations, summary })
}

/// Checks a recorded run, replaying its processes merged by timestamp.
pub fn check_run(invs: &[Invariant], run: &Run, mode: Mode) -> Result<CheckOutcome> {
    let merged = run.merged();
    check_stream(invs, &merged, mode, run.processes.keys().copied().collect())
}
