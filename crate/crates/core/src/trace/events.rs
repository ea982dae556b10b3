//! High-level events reconstructed from raw records.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::trace::record::{RecordBody, StepKey, TraceRecord};
use crate::value::{Scalar, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Call(ApiCallEvent),
    VarChange(VarChangeEvent),
}

/// One API invocation: paired entry/exit plus everything nested inside it on
/// the same thread.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiCallEvent {
    pub func: String,
    pub entry: TraceRecord,
    /// `None` when the stream ended before the call returned.
    pub exit: Option<TraceRecord>,
    pub children: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarChangeEvent {
    pub pid: u64,
    pub tid: u64,
    pub var_type: String,
    pub var_id: String,
    pub attr: String,
    /// Previous observed value of `(var_id, attr)` in this process; absent on
    /// first observation.
    pub old_value: Option<Value>,
    pub new_value: Value,
    pub timestamp: u64,
    pub meta: BTreeMap<String, Scalar>,
}

impl VarChangeEvent {
    /// True when the value actually moved (first observations count as moves).
    pub fn is_change(&self) -> bool {
        self.old_value.as_ref() != Some(&self.new_value)
    }

    pub fn step(&self) -> StepKey {
        self.meta.get(crate::trace::STEP_KEY).and_then(Scalar::as_int)
    }
}

impl ApiCallEvent {
    pub fn is_complete(&self) -> bool {
        self.exit.is_some()
    }

    pub fn duration(&self) -> Option<u64> {
        self.exit.as_ref().map(|x| x.ts - self.entry.ts)
    }

    pub fn meta(&self) -> &BTreeMap<String, Scalar> {
        &self.entry.meta
    }

    pub fn step(&self) -> StepKey {
        self.entry.step()
    }

    pub fn args(&self) -> &[Value] {
        match &self.entry.body {
            RecordBody::Entry { args, .. } => args,
            _ => &[],
        }
    }

    pub fn ret(&self) -> Option<&Value> {
        match self.exit.as_ref().map(|r| &r.body) {
            Some(RecordBody::Exit { ret, .. }) => Some(ret),
            _ => None,
        }
    }

    /// Pre-order walk over every nested event.
    pub fn for_each_descendant<'a>(&'a self, f: &mut impl FnMut(&'a Event)) {
        for child in &self.children {
            f(child);
            if let Event::Call(call) = child {
                call.for_each_descendant(f);
            }
        }
    }

    /// Pre-order walk over this call and every nested call.
    pub fn for_each_call<'a>(&'a self, f: &mut impl FnMut(&'a ApiCallEvent)) {
        f(self);
        for child in &self.children {
            if let Event::Call(call) = child {
                call.for_each_call(f);
            }
        }
    }
}

struct Frame {
    entry: TraceRecord,
    children: Vec<Event>,
}

/// Computes the previous value for every VAR_STATE record, keyed by
/// `(pid, var_id, attr)` in `(ts, tid, thread order)` order so that the
/// result does not depend on how threads were interleaved in the input.
fn previous_values(threads: &BTreeMap<(u64, u64), Vec<&TraceRecord>>) -> BTreeMap<(u64, u64, usize), Option<Value>> {
    type Key<'a> = (u64, &'a str, &'a str);
    let mut streams: BTreeMap<Key<'_>, Vec<(u64, u64, usize, &Value)>> = BTreeMap::new();
    for (&(pid, tid), recs) in threads {
        for (i, r) in recs.iter().enumerate() {
            if let RecordBody::VarState {
                var_id, attr, value, ..
            } = &r.body
            {
                streams
                    .entry((pid, var_id.as_str(), attr.as_str()))
                    .or_default()
                    .push((r.ts, tid, i, value));
            }
        }
    }
    let mut out = BTreeMap::new();
    for ((pid, _, _), mut states) in streams {
        states.sort_by_key(|&(ts, tid, i, _)| (ts, tid, i));
        let mut prev: Option<Value> = None;
        for (_, tid, i, value) in states {
            out.insert((pid, tid, i), prev.replace(value.clone()));
        }
    }
    out
}

/// Rebuilds API call spans and variable-change events.
///
/// Output is grouped by `(pid, tid)` in ascending order, each thread's
/// top-level events in stream order. Entries still open at the end of the
/// stream are returned as incomplete calls.
pub fn reconstruct_events(records: &[TraceRecord]) -> Result<Vec<Event>> {
    let mut threads: BTreeMap<(u64, u64), Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        threads.entry(r.thread()).or_default().push(r);
    }
    let mut previous = previous_values(&threads);

    let mut out = Vec::new();
    for (&(pid, tid), recs) in &threads {
        let mut stack: Vec<Frame> = Vec::new();
        let mut roots: Vec<Event> = Vec::new();
        for (i, r) in recs.iter().enumerate() {
            match &r.body {
                RecordBody::Entry { .. } => stack.push(Frame {
                    entry: (*r).clone(),
                    children: Vec::new(),
                }),
                RecordBody::Exit { func, .. } => {
                    let matches = stack.last().and_then(|f| f.entry.func()) == Some(func.as_str());
                    if !matches {
                        return Err(Error::ExitWithoutEntry {
                            func: func.clone(),
                            pid,
                            tid,
                            ts: r.ts,
                        });
                    }
                    let frame = stack.pop().expect("checked non-empty");
                    let event = Event::Call(ApiCallEvent {
                        func: func.clone(),
                        entry: frame.entry,
                        exit: Some((*r).clone()),
                        children: frame.children,
                    });
                    match stack.last_mut() {
                        Some(parent) => parent.children.push(event),
                        None => roots.push(event),
                    }
                }
                RecordBody::VarState {
                    var_type,
                    var_id,
                    attr,
                    value,
                } => {
                    let event = Event::VarChange(VarChangeEvent {
                        pid,
                        tid,
                        var_type: var_type.clone(),
                        var_id: var_id.clone(),
                        attr: attr.clone(),
                        old_value: previous.remove(&(pid, tid, i)).flatten(),
                        new_value: value.clone(),
                        timestamp: r.ts,
                        meta: r.meta.clone(),
                    });
                    match stack.last_mut() {
                        Some(parent) => parent.children.push(event),
                        None => roots.push(event),
                    }
                }
            }
        }
        // Unwind open frames innermost-first so nesting is preserved.
        while let Some(frame) = stack.pop() {
            let event = Event::Call(ApiCallEvent {
                func: frame.entry.func().unwrap_or_default().to_string(),
                entry: frame.entry,
                exit: None,
                children: frame.children,
            });
            match stack.last_mut() {
                Some(parent) => parent.children.push(event),
                None => roots.push(event),
            }
        }
        out.extend(roots);
    }
    Ok(out)
}

/// Walks every API call (at any depth) in a reconstructed event list.
pub fn for_each_call<'a>(events: &'a [Event], f: &mut impl FnMut(&'a ApiCallEvent)) {
    for e in events {
        if let Event::Call(call) = e {
            call.for_each_call(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::STEP_KEY;

    fn rec(ts: u64, tid: u64, body: RecordBody) -> TraceRecord {
        TraceRecord {
            ts,
            pid: 0,
            tid,
            meta: BTreeMap::from([(STEP_KEY.to_string(), Scalar::Int(0))]),
            body,
        }
    }
    fn entry(ts: u64, f: &str) -> TraceRecord {
        rec(ts, 0, RecordBody::Entry { func: f.into(), args: vec![] })
    }
    fn exit(ts: u64, f: &str) -> TraceRecord {
        rec(ts, 0, RecordBody::Exit { func: f.into(), ret: Value::None, exception: None })
    }
    fn var(ts: u64, tid: u64, attr: &str, v: i64) -> TraceRecord {
        rec(
            ts,
            tid,
            RecordBody::VarState {
                var_type: "torch.nn.Parameter".into(),
                var_id: "w".into(),
                attr: attr.into(),
                value: Value::Int(v),
            },
        )
    }

    fn call(e: &Event) -> &ApiCallEvent {
        match e {
            Event::Call(c) => c,
            other => panic!("expected call, got {other:?}"),
        }
    }

    #[test]
    fn single_span() {
        let events = reconstruct_events(&[entry(10, "f"), exit(25, "f")]).unwrap();
        assert_eq!(events.len(), 1);
        let c = call(&events[0]);
        assert_eq!(c.duration(), Some(15));
        assert!(c.children.is_empty());
    }

    #[test]
    fn nested_spans() {
        let events =
            reconstruct_events(&[entry(1, "f"), entry(2, "g"), exit(3, "g"), exit(4, "f")]).unwrap();
        assert_eq!(events.len(), 1);
        let f = call(&events[0]);
        assert_eq!(f.func, "f");
        assert_eq!(f.children.len(), 1);
        assert_eq!(call(&f.children[0]).func, "g");
    }

    #[test]
    fn step_span_with_parameter_update() {
        let recs = vec![
            entry(1, "torch.optim.Optimizer.step"),
            var(2, 0, "data", 7),
            exit(3, "torch.optim.Optimizer.step"),
        ];
        let events = reconstruct_events(&recs).unwrap();
        let step = call(&events[0]);
        assert!(step.func.ends_with("step"));
        assert_eq!(step.children.len(), 1);
        match &step.children[0] {
            Event::VarChange(v) => {
                assert_eq!(v.attr, "data");
                assert_eq!(v.old_value, None);
                assert!(v.is_change());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_without_entry_is_an_error() {
        assert!(matches!(
            reconstruct_events(&[exit(1, "f")]),
            Err(Error::ExitWithoutEntry { .. })
        ));
        assert!(matches!(
            reconstruct_events(&[entry(1, "f"), exit(2, "g")]),
            Err(Error::ExitWithoutEntry { .. })
        ));
    }

    #[test]
    fn open_spans_are_flagged_incomplete() {
        let events = reconstruct_events(&[entry(1, "f"), entry(2, "g"), exit(3, "g")]).unwrap();
        let f = call(&events[0]);
        assert!(!f.is_complete());
        assert!(call(&f.children[0]).is_complete());
    }

    #[test]
    fn old_values_pair_chronologically() {
        let recs = vec![var(1, 0, "data", 1), var(2, 0, "data", 1), var(3, 0, "data", 2)];
        let events = reconstruct_events(&recs).unwrap();
        let changes: Vec<_> = events
            .iter()
            .map(|e| match e {
                Event::VarChange(v) => (v.old_value.clone(), v.is_change()),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(
            changes,
            vec![
                (None, true),
                (Some(Value::Int(1)), false),
                (Some(Value::Int(1)), true)
            ]
        );
    }

    #[test]
    fn interleaving_across_threads_does_not_matter() {
        let a = vec![
            entry(1, "f"),
            var(2, 1, "grad", 1),
            exit(3, "f"),
            var(4, 1, "grad", 2),
        ];
        let b = vec![
            var(2, 1, "grad", 1),
            var(4, 1, "grad", 2),
            entry(1, "f"),
            exit(3, "f"),
        ];
        assert_eq!(reconstruct_events(&a).unwrap(), reconstruct_events(&b).unwrap());
    }
}
