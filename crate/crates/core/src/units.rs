//! Checkable units assembled from a record stream.
//!
//! Both inference and the verifier look at traces through the same units:
//! closed API spans (with everything nested inside them) and per-step groups
//! (end-of-step variable observations, per-thread API windows and per-API
//! call lists). [`UnitCollector`] builds them incrementally; with the step
//! barrier enabled it releases each step group as soon as every process has
//! moved past it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result, Warning, WarningKind};
use crate::relation::ExampleRecord;
use crate::trace::{RecordBody, Run, StepKey, TraceRecord, VarChangeEvent};
use crate::value::{Scalar, Value};

pub const META_PREFIX: &str = "meta_vars.";

/// Variables are aligned across processes by the part of their id after the
/// last `::` (ids may carry a per-process prefix).
pub fn align_key(var_id: &str) -> &str {
    var_id.rsplit("::").next().unwrap_or(var_id)
}

fn put_meta(meta: &BTreeMap<String, Scalar>, fields: &mut BTreeMap<String, Value>) {
    for (k, v) in meta {
        fields.insert(format!("{META_PREFIX}{k}"), v.clone().into());
    }
}

/// Field view of an API entry record.
pub fn entry_record(r: &TraceRecord) -> ExampleRecord {
    let mut fields = BTreeMap::new();
    if let RecordBody::Entry { args, .. } = &r.body {
        for (i, a) in args.iter().enumerate() {
            fields.insert(format!("args.{i}"), a.clone());
            for path in a.attribute_paths() {
                if let Some(v) = a.attribute(&path) {
                    fields.insert(format!("args.{i}.{path}"), v);
                }
            }
        }
    }
    put_meta(&r.meta, &mut fields);
    ExampleRecord {
        pid: r.pid,
        tid: r.tid,
        ts: r.ts,
        source: r.func().unwrap_or_default().to_string(),
        fields,
    }
}

/// End-of-step state of one variable attribute that was written during the
/// step. The record's fields are the variable's full attribute snapshot plus
/// the meta variables of the last write.
#[derive(Debug, Clone, PartialEq)]
pub struct VarObs {
    pub pid: u64,
    pub var_type: String,
    pub var_id: String,
    pub attr: String,
    pub record: Arc<ExampleRecord>,
}

impl VarObs {
    pub fn value(&self) -> &Value {
        &self.record.fields[&self.attr]
    }

    pub fn align(&self) -> &str {
        align_key(&self.var_id)
    }

    fn sort_key(&self) -> (&str, &str, &str, u64, &str) {
        (&self.var_type, &self.attr, self.align(), self.pid, &self.var_id)
    }
}

struct LastWrite {
    ts: u64,
    tid: u64,
    meta: BTreeMap<String, Scalar>,
}

#[derive(Default)]
struct VarSnapshot {
    var_type: String,
    attrs: BTreeMap<String, Value>,
    writes: BTreeMap<String, LastWrite>,
}

#[derive(Default)]
struct PidVars {
    step: Option<StepKey>,
    vars: BTreeMap<String, VarSnapshot>,
    touched: BTreeSet<(String, String)>,
}

impl PidVars {
    fn flush(&mut self, pid: u64) -> Vec<VarObs> {
        let touched = std::mem::take(&mut self.touched);
        let mut out = Vec::with_capacity(touched.len());
        for (var_id, attr) in touched {
            let snap = &self.vars[&var_id];
            let write = &snap.writes[&attr];
            let mut fields = snap.attrs.clone();
            put_meta(&write.meta, &mut fields);
            out.push(VarObs {
                pid,
                var_type: snap.var_type.clone(),
                var_id: var_id.clone(),
                attr,
                record: Arc::new(ExampleRecord {
                    pid,
                    tid: write.tid,
                    ts: write.ts,
                    source: format!("{}:{}", snap.var_type, var_id),
                    fields,
                }),
            });
        }
        out
    }
}

/// Turns VAR_STATE records into end-of-step observations, per process.
#[derive(Default)]
pub struct ObservationBuilder {
    pids: BTreeMap<u64, PidVars>,
}

impl ObservationBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one record. When the record moves its process to a new step,
    /// the observations of the finished step are returned.
    pub fn push(&mut self, r: &TraceRecord) -> Option<(StepKey, Vec<VarObs>)> {
        let state = self.pids.entry(r.pid).or_default();
        let step = r.step();
        let mut flushed = None;
        if state.step != Some(step) {
            if let Some(prev) = state.step {
                let obs = state.flush(r.pid);
                if !obs.is_empty() {
                    flushed = Some((prev, obs));
                }
            }
            state.step = Some(step);
        }
        if let RecordBody::VarState {
            var_type,
            var_id,
            attr,
            value,
        } = &r.body
        {
            let snap = state.vars.entry(var_id.clone()).or_default();
            snap.var_type.clone_from(var_type);
            snap.attrs.insert(attr.clone(), value.clone());
            snap.writes.insert(
                attr.clone(),
                LastWrite {
                    ts: r.ts,
                    tid: r.tid,
                    meta: r.meta.clone(),
                },
            );
            state.touched.insert((var_id.clone(), attr.clone()));
        }
        flushed
    }

    /// Flushes the current step of every process.
    pub fn finish(&mut self) -> Vec<(StepKey, Vec<VarObs>)> {
        let mut out = Vec::new();
        for (&pid, state) in &mut self.pids {
            if let Some(step) = state.step {
                let obs = state.flush(pid);
                if !obs.is_empty() {
                    out.push((step, obs));
                }
            }
        }
        out
    }
}

/// An API call nested inside another call.
#[derive(Debug, Clone, PartialEq)]
pub struct CallSummary {
    pub func: String,
    pub ts: u64,
    pub args: Vec<Value>,
    pub ret: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Child {
    Call(Arc<CallSummary>),
    Var(Arc<VarChangeEvent>),
}

impl Child {
    pub fn ts(&self) -> u64 {
        match self {
            Child::Call(c) => c.ts,
            Child::Var(v) => v.timestamp,
        }
    }
}

/// A closed API call with every event nested inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanUnit {
    pub pid: u64,
    pub tid: u64,
    pub step: StepKey,
    pub func: String,
    pub args: Vec<Value>,
    pub ret: Value,
    pub entry_ts: u64,
    pub exit_ts: u64,
    /// Position of the exit record in its thread.
    pub exit_pos: u64,
    pub record: Arc<ExampleRecord>,
    pub descendants: Vec<Child>,
}

impl SpanUnit {
    pub fn thread_key(&self) -> String {
        format!("p{}/t{}", self.pid, self.tid)
    }
}

/// One call, as seen by per-step argument grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgCall {
    pub pid: u64,
    pub tid: u64,
    pub pos: u64,
    pub args: Vec<Value>,
    pub record: Arc<ExampleRecord>,
}

/// First occurrence of an API inside one (thread, step) window.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstCall {
    pub pos: u64,
    pub record: Arc<ExampleRecord>,
}

/// Everything checked once per step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepUnit {
    pub step: StepKey,
    pub obs: Vec<VarObs>,
    pub windows: BTreeMap<(u64, u64), BTreeMap<String, FirstCall>>,
    pub calls: BTreeMap<String, Vec<ArgCall>>,
}

impl StepUnit {
    fn new(step: StepKey) -> Self {
        StepUnit {
            step,
            ..Default::default()
        }
    }

    fn normalize(&mut self) {
        self.obs.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        for calls in self.calls.values_mut() {
            calls.sort_by_key(|c| (c.pid, c.tid, c.pos));
        }
    }

    /// Observations of `(var_type, attr)` grouped by alignment key.
    pub fn obs_groups<'a>(&'a self, var_type: &str, attr: &str) -> BTreeMap<&'a str, Vec<&'a VarObs>> {
        let mut out: BTreeMap<&str, Vec<&VarObs>> = BTreeMap::new();
        for o in &self.obs {
            if o.var_type == var_type && o.attr == attr {
                out.entry(o.align()).or_default().push(o);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Span(SpanUnit),
    Step(StepUnit),
}

struct Frame {
    entry: TraceRecord,
    record: Arc<ExampleRecord>,
    descendants: Vec<Child>,
}

#[derive(Default)]
struct ThreadState {
    pos: u64,
    stack: Vec<Frame>,
}

/// Incremental builder of [`Unit`]s from a record stream.
pub struct UnitCollector {
    barrier: bool,
    expected_pids: BTreeSet<u64>,
    obs: ObservationBuilder,
    threads: BTreeMap<(u64, u64), ThreadState>,
    pending: BTreeMap<StepKey, StepUnit>,
    closed_upto: Option<StepKey>,
    pid_step: BTreeMap<u64, StepKey>,
    max_step: Option<i64>,
    previous: HashMap<(u64, String, String), Value>,
    warnings: Vec<Warning>,
}

impl UnitCollector {
    /// Collector that keeps every step open until [`UnitCollector::finish`].
    pub fn batch() -> Self {
        Self::new(false, BTreeSet::new())
    }

    /// Collector that releases step `s` once every process (the expected ones
    /// plus any seen so far) has moved past it, or once some process has
    /// reached step `s + 2`.
    pub fn online(expected_pids: BTreeSet<u64>) -> Self {
        Self::new(true, expected_pids)
    }

    fn new(barrier: bool, expected_pids: BTreeSet<u64>) -> Self {
        UnitCollector {
            barrier,
            expected_pids,
            obs: ObservationBuilder::new(),
            threads: BTreeMap::new(),
            pending: BTreeMap::new(),
            closed_upto: None,
            pid_step: BTreeMap::new(),
            max_step: None,
            previous: HashMap::new(),
            warnings: Vec::new(),
        }
    }

    fn is_closed(&self, step: StepKey) -> bool {
        self.closed_upto.is_some_and(|c| step <= c)
    }

    fn step_unit(&mut self, step: StepKey, what: &str) -> Option<&mut StepUnit> {
        if self.is_closed(step) {
            self.warnings.push(Warning::new(
                WarningKind::LateRecord,
                format!("{what} for step {step:?} arrived after the step was checked"),
            ));
            return None;
        }
        Some(self.pending.entry(step).or_insert_with(|| StepUnit::new(step)))
    }

    pub fn push(&mut self, r: &TraceRecord, out: &mut Vec<Unit>) -> Result<()> {
        let key = r.thread();
        let pos = {
            let t = self.threads.entry(key).or_default();
            t.pos += 1;
            t.pos - 1
        };
        let step = r.step();
        if let Some((prev, obs)) = self.obs.push(r) {
            if let Some(unit) = self.step_unit(prev, "variable state") {
                unit.obs.extend(obs);
            }
        }
        self.pid_step.insert(r.pid, step);
        if let Some(s) = step {
            self.max_step = Some(self.max_step.map_or(s, |m| m.max(s)));
        }

        match &r.body {
            RecordBody::Entry { func, args } => {
                let record = Arc::new(entry_record(r));
                if let Some(unit) = self.step_unit(step, "API call") {
                    unit.windows.entry(key).or_default().entry(func.clone()).or_insert(FirstCall {
                        pos,
                        record: record.clone(),
                    });
                    unit.calls.entry(func.clone()).or_default().push(ArgCall {
                        pid: r.pid,
                        tid: r.tid,
                        pos,
                        args: args.clone(),
                        record: record.clone(),
                    });
                }
                let thread = self.threads.get_mut(&key).expect("thread registered above");
                thread.stack.push(Frame {
                    entry: r.clone(),
                    record,
                    descendants: Vec::new(),
                });
            }
            RecordBody::Exit { func, ret, .. } => {
                let thread = self.threads.get_mut(&key).expect("thread registered above");
                if thread.stack.last().and_then(|f| f.entry.func()) != Some(func.as_str()) {
                    return Err(Error::ExitWithoutEntry {
                        func: func.clone(),
                        pid: r.pid,
                        tid: r.tid,
                        ts: r.ts,
                    });
                }
                let frame = thread.stack.pop().expect("checked non-empty");
                let (entry_ts, step) = (frame.entry.ts, frame.entry.step());
                let args = match frame.entry.body {
                    RecordBody::Entry { args, .. } => args,
                    _ => unreachable!("frames hold entry records"),
                };
                if let Some(parent) = thread.stack.last_mut() {
                    parent.descendants.extend(frame.descendants.iter().cloned());
                    parent.descendants.push(Child::Call(Arc::new(CallSummary {
                        func: func.clone(),
                        ts: entry_ts,
                        args: args.clone(),
                        ret: Some(ret.clone()),
                    })));
                }
                out.push(Unit::Span(SpanUnit {
                    pid: r.pid,
                    tid: r.tid,
                    step,
                    func: func.clone(),
                    args,
                    ret: ret.clone(),
                    entry_ts,
                    exit_ts: r.ts,
                    exit_pos: pos,
                    record: frame.record,
                    descendants: frame.descendants,
                }));
            }
            RecordBody::VarState {
                var_type,
                var_id,
                attr,
                value,
            } => {
                let old_value = self
                    .previous
                    .insert((r.pid, var_id.clone(), attr.clone()), value.clone());
                let thread = self.threads.get_mut(&key).expect("thread registered above");
                if let Some(parent) = thread.stack.last_mut() {
                    parent.descendants.push(Child::Var(Arc::new(VarChangeEvent {
                        pid: r.pid,
                        tid: r.tid,
                        var_type: var_type.clone(),
                        var_id: var_id.clone(),
                        attr: attr.clone(),
                        old_value,
                        new_value: value.clone(),
                        timestamp: r.ts,
                        meta: r.meta.clone(),
                    })));
                }
            }
        }

        if self.barrier {
            self.release_ready(out);
        }
        Ok(())
    }

    fn ready(&self, step: StepKey) -> bool {
        let passed = |pid: &u64| self.pid_step.get(pid).is_some_and(|cur| *cur > step);
        let all_passed = self.expected_pids.iter().all(passed) && self.pid_step.keys().all(passed);
        let timed_out = matches!((step, self.max_step), (Some(s), Some(m)) if m >= s + 2);
        all_passed || timed_out
    }

    fn release_ready(&mut self, out: &mut Vec<Unit>) {
        while let Some((&step, _)) = self.pending.first_key_value() {
            if !self.ready(step) {
                break;
            }
            let mut unit = self.pending.remove(&step).expect("present");
            unit.normalize();
            self.closed_upto = Some(step);
            out.push(Unit::Step(unit));
        }
    }

    /// Ends the stream: releases every remaining step and reports calls that
    /// never returned.
    pub fn finish(mut self, out: &mut Vec<Unit>) -> Vec<Warning> {
        for (step, obs) in self.obs.finish() {
            if let Some(unit) = self.step_unit(step, "variable state") {
                unit.obs.extend(obs);
            }
        }
        for (_, mut unit) in std::mem::take(&mut self.pending) {
            unit.normalize();
            out.push(Unit::Step(unit));
        }
        for ((pid, tid), t) in &self.threads {
            for frame in &t.stack {
                self.warnings.push(Warning::new(
                    WarningKind::IncompleteStream,
                    format!(
                        "call to `{}` on pid {pid} tid {tid} (ts {}) never returned",
                        frame.entry.func().unwrap_or_default(),
                        frame.entry.ts
                    ),
                ));
            }
        }
        self.warnings
    }
}

/// Up to two distinct variable instances that took a value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Holders(Vec<(u64, String)>);

impl Holders {
    fn add(&mut self, pid: u64, var_id: &str) {
        if self.0.len() < 2 && !self.0.iter().any(|(p, v)| *p == pid && v == var_id) {
            self.0.push((pid, var_id.to_string()));
        }
    }

    /// True if some instance here differs from some instance in `other`.
    pub fn distinct_pair(&self, other: &Holders) -> bool {
        self.0.iter().any(|a| other.0.iter().any(|b| a != b))
    }
}

/// All units of one run, plus value statistics used to seed hypotheses.
#[derive(Debug, Default)]
pub struct RunIndex {
    pub run_id: String,
    pub spans: Vec<SpanUnit>,
    pub steps: Vec<StepUnit>,
    /// Non-None values each `(var_type, attr)` took, with who held them.
    pub var_values: BTreeMap<(String, String), HashMap<Value, Holders>>,
    /// Attributes observed holding tensor digests, per variable type.
    pub digest_attrs: BTreeMap<String, BTreeSet<String>>,
    pub warnings: Vec<Warning>,
    spans_by_func: BTreeMap<String, Vec<usize>>,
}

impl RunIndex {
    pub fn build(run: &Run) -> Result<RunIndex> {
        Self::from_records(&run.id, run.processes.values().flatten())
    }

    /// Indexes records in any cross-process order; only the order within
    /// each thread matters.
    pub fn from_records<'a>(run_id: &str, records: impl IntoIterator<Item = &'a TraceRecord>) -> Result<RunIndex> {
        let mut collector = UnitCollector::batch();
        let mut units = Vec::new();
        let mut index = RunIndex {
            run_id: run_id.to_string(),
            ..Default::default()
        };
        let mut any = false;
        for r in records {
            any = true;
            collector.push(r, &mut units)?;
            if let RecordBody::VarState {
                var_type,
                var_id,
                attr,
                value,
            } = &r.body
            {
                if value.is_digest() {
                    index
                        .digest_attrs
                        .entry(var_type.clone())
                        .or_default()
                        .insert(attr.clone());
                }
                if !value.is_none() {
                    index
                        .var_values
                        .entry((var_type.clone(), attr.clone()))
                        .or_default()
                        .entry(value.clone())
                        .or_default()
                        .add(r.pid, var_id);
                }
            }
        }
        index.warnings = collector.finish(&mut units);
        if !any {
            index
                .warnings
                .push(Warning::new(WarningKind::EmptyTrace, format!("run `{run_id}` has no records")));
        }
        for u in units {
            match u {
                Unit::Span(s) => {
                    index.spans_by_func.entry(s.func.clone()).or_default().push(index.spans.len());
                    index.spans.push(s);
                }
                Unit::Step(s) => index.steps.push(s),
            }
        }
        index.steps.sort_by_key(|s| s.step);
        Ok(index)
    }

    pub fn spans_of<'a>(&'a self, func: &str) -> impl Iterator<Item = &'a SpanUnit> + 'a {
        self.spans_by_func
            .get(func)
            .into_iter()
            .flatten()
            .map(|&i| &self.spans[i])
    }
}
