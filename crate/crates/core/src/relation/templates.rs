//! The five built-in relation templates.

use std::collections::{BTreeMap, BTreeSet};

use crate::descriptor::{ApiDescriptor, Descriptor, ValuePattern, VarDescriptor};
use crate::error::Result;
use crate::relation::registry::{GenOptions, RelationTemplate};
use crate::relation::{Example, OutputBound, Relation, RelationKind, Subject};
use crate::units::{Child, RunIndex, SpanUnit, StepUnit, VarObs};
use crate::value::Value;

fn same_instance(a: &VarObs, b: &VarObs) -> bool {
    a.pid == b.pid && a.var_id == b.var_id
}

fn pair_example(rel: &Relation, unit: &StepUnit, key: &str, a: &VarObs, b: &VarObs) -> Result<Example> {
    Example::new(
        rel,
        unit.step,
        key.to_string(),
        vec![a.record.clone(), b.record.clone()],
        Subject::Pair {
            left: a.value().clone(),
            right: b.value().clone(),
        },
    )
}

/// Pairs of distinct variable instances sharing an alignment key within the
/// step. A self-pair yields unordered pairs; a cross-attribute pair yields
/// every (left, right) combination.
pub(crate) fn consistent_examples(rel: &Relation, unit: &StepUnit, sink: &mut dyn FnMut(Example)) -> Result<()> {
    let Relation::Consistent { left, right } = rel else {
        return Ok(());
    };
    let lefts = unit.obs_groups(&left.var_type, &left.attr);
    if left == right {
        for (key, group) in &lefts {
            for (i, a) in group.iter().enumerate() {
                for b in &group[i + 1..] {
                    if !same_instance(a, b) {
                        sink(pair_example(rel, unit, key, a, b)?);
                    }
                }
            }
        }
    } else {
        let rights = unit.obs_groups(&right.var_type, &right.attr);
        for (key, ls) in &lefts {
            let Some(rs) = rights.get(key) else { continue };
            for a in ls {
                for b in rs {
                    if !same_instance(a, b) {
                        sink(pair_example(rel, unit, key, a, b)?);
                    }
                }
            }
        }
    }
    Ok(())
}

fn child_matches(d: &Descriptor, c: &Child) -> bool {
    match (d, c) {
        (Descriptor::Api(d), Child::Call(call)) => d.matches_call(&call.func, &call.args, call.ret.as_ref()),
        (Descriptor::Var(d), Child::Var(v)) => v.is_change() && d.matches_change(v),
        _ => false,
    }
}

pub(crate) fn span_example(rel: &Relation, span: &SpanUnit) -> Option<Result<Example>> {
    let Relation::EventContain { parent, child } = rel else {
        return None;
    };
    if !parent.matches_call(&span.func, &span.args, Some(&span.ret)) {
        return None;
    }
    let mut matched: Vec<u64> = span
        .descendants
        .iter()
        .filter(|c| child_matches(child, c))
        .map(Child::ts)
        .collect();
    matched.sort_unstable();
    Some(Example::new(
        rel,
        span.step,
        span.thread_key(),
        vec![span.record.clone()],
        Subject::Span {
            func: span.func.clone(),
            entry_ts: span.entry_ts,
            exit_ts: Some(span.exit_ts),
            matched,
        },
    ))
}

/// One example per (thread, step) window in which at least one listed API
/// occurs.
pub(crate) fn window_example(rel: &Relation, unit: &StepUnit, sink: &mut dyn FnMut(Example)) -> Result<()> {
    let Relation::ApiSequence { apis } = rel else {
        return Ok(());
    };
    for (&(pid, tid), firsts) in &unit.windows {
        let present: Vec<_> = apis.iter().map(|a| firsts.get(&a.func)).collect();
        if present.iter().all(Option::is_none) {
            continue;
        }
        let mut records: Vec<_> = present.iter().flatten().map(|f| (f.pos, f.record.clone())).collect();
        records.sort_by_key(|(pos, _)| *pos);
        records.dedup_by_key(|(pos, _)| *pos);
        sink(Example::new(
            rel,
            unit.step,
            format!("p{pid}/t{tid}"),
            records.into_iter().map(|(_, r)| r).collect(),
            Subject::Window {
                firsts: present.iter().map(|f| f.map(|f| f.pos)).collect(),
            },
        )?);
    }
    Ok(())
}

pub(crate) fn arg_example(rel: &Relation, unit: &StepUnit) -> Option<Result<Example>> {
    let Relation::ApiArg { api, arg, .. } = rel else {
        return None;
    };
    let calls: Vec<_> = unit
        .calls
        .get(&api.func)?
        .iter()
        .filter(|c| api.matches_args(&api.func, &c.args))
        .collect();
    if calls.is_empty() {
        return None;
    }
    Some(Example::new(
        rel,
        unit.step,
        String::new(),
        calls.iter().map(|c| c.record.clone()).collect(),
        Subject::Calls {
            values: calls.iter().map(|c| c.args.get(*arg).cloned()).collect(),
        },
    ))
}

pub(crate) fn output_example(rel: &Relation, span: &SpanUnit) -> Option<Result<Example>> {
    let Relation::ApiOutput { api, .. } = rel else {
        return None;
    };
    if !api.matches_call(&span.func, &span.args, Some(&span.ret)) {
        return None;
    }
    Some(Example::new(
        rel,
        span.step,
        span.thread_key(),
        vec![span.record.clone()],
        Subject::Output {
            args: span.args.clone(),
            ret: Some(span.ret.clone()),
        },
    ))
}

fn capped(mut set: BTreeSet<Relation>, max: usize) -> BTreeSet<Relation> {
    while set.len() > max {
        set.pop_last();
    }
    set
}

pub(crate) struct ConsistentTemplate;

impl RelationTemplate for ConsistentTemplate {
    fn kind(&self) -> RelationKind {
        RelationKind::Consistent
    }

    /// Descriptor-level enumeration: every unordered pair of `(type, attr)`
    /// groups, the self-pair included, whose value streams share a non-None
    /// value held by two different variable instances.
    fn hypotheses(&self, run: &RunIndex, opts: &GenOptions) -> BTreeSet<Relation> {
        let keys: Vec<_> = run.var_values.keys().collect();
        let mut out = BTreeSet::new();
        for (i, a) in keys.iter().enumerate() {
            for b in &keys[i..] {
                let (va, vb) = (&run.var_values[*a], &run.var_values[*b]);
                let (small, large) = if va.len() <= vb.len() { (va, vb) } else { (vb, va) };
                let matched = small
                    .iter()
                    .any(|(v, h)| large.get(v).is_some_and(|other| h.distinct_pair(other)));
                if matched {
                    out.insert(Relation::consistent(
                        VarDescriptor::new(&a.0, &a.1),
                        VarDescriptor::new(&b.0, &b.1),
                    ));
                }
            }
        }
        capped(out, opts.max_hypotheses)
    }

    fn examples(&self, rel: &Relation, run: &RunIndex, sink: &mut dyn FnMut(Example)) -> Result<()> {
        for unit in &run.steps {
            consistent_examples(rel, unit, sink)?;
        }
        Ok(())
    }
}

pub(crate) struct EventContainTemplate;

impl RelationTemplate for EventContainTemplate {
    fn kind(&self) -> RelationKind {
        RelationKind::EventContain
    }

    fn hypotheses(&self, run: &RunIndex, opts: &GenOptions) -> BTreeSet<Relation> {
        let mut seen: BTreeSet<(&str, Descriptor)> = BTreeSet::new();
        for span in &run.spans {
            if opts.is_blocked(&span.func) {
                continue;
            }
            for child in &span.descendants {
                match child {
                    Child::Call(c) if !opts.is_blocked(&c.func) => {
                        seen.insert((&span.func, ApiDescriptor::new(&c.func).into()));
                    }
                    Child::Var(v) if v.is_change() => {
                        let base = VarDescriptor::new(&v.var_type, &v.attr);
                        if v.new_value.is_none() {
                            let d = base.clone().with_change(None, Some(ValuePattern::Equals(Value::None)));
                            seen.insert((&span.func, d.into()));
                        }
                        if v.old_value.as_ref().is_some_and(Value::is_none) {
                            let d = base.clone().with_change(Some(ValuePattern::Equals(Value::None)), None);
                            seen.insert((&span.func, d.into()));
                        }
                        seen.insert((&span.func, base.into()));
                    }
                    _ => {}
                }
            }
        }
        let out = seen
            .into_iter()
            .map(|(parent, child)| Relation::EventContain {
                parent: ApiDescriptor::new(parent),
                child,
            })
            .collect();
        capped(out, opts.max_hypotheses)
    }

    fn examples(&self, rel: &Relation, run: &RunIndex, sink: &mut dyn FnMut(Example)) -> Result<()> {
        let Relation::EventContain { parent, .. } = rel else {
            return Ok(());
        };
        for span in run.spans_of(&parent.func) {
            if let Some(e) = span_example(rel, span) {
                sink(e?);
            }
        }
        Ok(())
    }
}

pub(crate) struct ApiSequenceTemplate;

/// Longest API tuple proposed for ordering.
const MAX_SEQUENCE_LEN: usize = 3;

impl RelationTemplate for ApiSequenceTemplate {
    fn kind(&self) -> RelationKind {
        RelationKind::ApiSequence
    }

    /// Ordered pairs and triples of first occurrences within a window.
    fn hypotheses(&self, run: &RunIndex, opts: &GenOptions) -> BTreeSet<Relation> {
        let mut seen: BTreeSet<Vec<&str>> = BTreeSet::new();
        for unit in &run.steps {
            for firsts in unit.windows.values() {
                let mut order: Vec<(u64, &str)> = firsts
                    .iter()
                    .filter(|(f, _)| !opts.is_blocked(f))
                    .map(|(f, c)| (c.pos, f.as_str()))
                    .collect();
                order.sort_unstable();
                let names: Vec<&str> = order.into_iter().map(|(_, f)| f).collect();
                let n = names.len();
                for i in 0..n {
                    for j in i + 1..n {
                        seen.insert(vec![names[i], names[j]]);
                        if MAX_SEQUENCE_LEN >= 3 {
                            for k in j + 1..n {
                                seen.insert(vec![names[i], names[j], names[k]]);
                            }
                        }
                    }
                }
            }
        }
        let out = seen
            .into_iter()
            .map(|names| Relation::ApiSequence {
                apis: names.into_iter().map(ApiDescriptor::new).collect(),
            })
            .collect();
        capped(out, opts.max_hypotheses)
    }

    fn examples(&self, rel: &Relation, run: &RunIndex, sink: &mut dyn FnMut(Example)) -> Result<()> {
        for unit in &run.steps {
            window_example(rel, unit, sink)?;
        }
        Ok(())
    }
}

pub(crate) struct ApiArgTemplate;

impl RelationTemplate for ApiArgTemplate {
    fn kind(&self) -> RelationKind {
        RelationKind::ApiArg
    }

    /// Each polarity is proposed when some (API, step) group shows it.
    fn hypotheses(&self, run: &RunIndex, opts: &GenOptions) -> BTreeSet<Relation> {
        let mut seen: BTreeSet<(&str, usize, bool)> = BTreeSet::new();
        for unit in &run.steps {
            for (func, calls) in &unit.calls {
                if opts.is_blocked(func) {
                    continue;
                }
                let arity = calls.iter().map(|c| c.args.len()).max().unwrap_or(0);
                for i in 0..arity {
                    let mut values: Vec<Option<&Value>> = calls.iter().map(|c| c.args.get(i)).collect();
                    if values.windows(2).all(|w| w[0] == w[1]) {
                        seen.insert((func, i, false));
                    }
                    values.sort();
                    if values.windows(2).all(|w| w[0] != w[1]) {
                        seen.insert((func, i, true));
                    }
                }
            }
        }
        let out = seen
            .into_iter()
            .map(|(func, arg, is_distinct)| Relation::ApiArg {
                api: ApiDescriptor::new(func),
                arg,
                is_distinct,
            })
            .collect();
        capped(out, opts.max_hypotheses)
    }

    fn examples(&self, rel: &Relation, run: &RunIndex, sink: &mut dyn FnMut(Example)) -> Result<()> {
        for unit in &run.steps {
            if let Some(e) = arg_example(rel, unit) {
                sink(e?);
            }
        }
        Ok(())
    }
}

pub(crate) struct ApiOutputTemplate;

impl RelationTemplate for ApiOutputTemplate {
    fn kind(&self) -> RelationKind {
        RelationKind::ApiOutput
    }

    /// For every attribute of a structured return value: a constant bound on
    /// the observed value, and an equality bound with every argument that
    /// carried the same attribute value.
    fn hypotheses(&self, run: &RunIndex, opts: &GenOptions) -> BTreeSet<Relation> {
        let mut seen: BTreeMap<&str, BTreeSet<OutputBound>> = BTreeMap::new();
        for span in &run.spans {
            if opts.is_blocked(&span.func) {
                continue;
            }
            for attr in span.ret.attribute_paths() {
                let Some(value) = span.ret.attribute(&attr) else { continue };
                let bounds = seen.entry(&span.func).or_default();
                for (arg, a) in span.args.iter().enumerate() {
                    if a.attribute(&attr).as_ref() == Some(&value) {
                        bounds.insert(OutputBound::EqualsInputAttr { attr: attr.clone(), arg });
                    }
                }
                bounds.insert(OutputBound::ConstantAttr { attr, value });
            }
        }
        let out = seen
            .into_iter()
            .flat_map(|(func, bounds)| {
                bounds.into_iter().map(move |bound| Relation::ApiOutput {
                    api: ApiDescriptor::new(func),
                    bound,
                })
            })
            .collect();
        capped(out, opts.max_hypotheses)
    }

    fn examples(&self, rel: &Relation, run: &RunIndex, sink: &mut dyn FnMut(Example)) -> Result<()> {
        let Relation::ApiOutput { api, .. } = rel else {
            return Ok(());
        };
        for span in run.spans_of(&api.func) {
            if let Some(e) = output_example(rel, span) {
                sink(e?);
            }
        }
        Ok(())
    }
}
