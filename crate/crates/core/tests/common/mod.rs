#![allow(dead_code)]

//! Helpers shared by the integration tests and the acceptance harness.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trainvar_core::infer::{infer, InferConfig};
use trainvar_core::precondition::{deduce, is_safe, prune, DeduceOptions, Deduction, Strategy};
use trainvar_core::relation::ExampleRecord;
use trainvar_core::synth::{generate, FaultSpec, RunConfig};
use trainvar_core::verify::{check_run, Mode, Violation};
use trainvar_core::trace::{RecordBody, TraceRecord};
use trainvar_core::{Clause, CondType, Condition, Invariant, Precondition, Registry, Run, Scalar, Value};

// ---------------------------------------------------------------------------
// Pipeline helpers

pub fn run_of(cfg: &RunConfig, id: &str) -> Run {
    generate(cfg, id).expect("valid config")
}

pub fn infer_from(cfgs: &[RunConfig]) -> Vec<Invariant> {
    let runs: Vec<Run> = cfgs
        .iter()
        .enumerate()
        .map(|(i, c)| run_of(c, &format!("train{i}")))
        .collect();
    infer(&runs, &Registry::builtin(), &InferConfig::default())
        .expect("inference succeeds")
        .invariants
}

pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    RunConfig { seed, ..cfg.clone() }
}

pub fn with_fault(cfg: &RunConfig, fault: &str) -> RunConfig {
    RunConfig {
        fault: Some(fault.parse::<FaultSpec>().expect("fault spec")),
        ..cfg.clone()
    }
}

pub fn violations(invs: &[Invariant], cfg: &RunConfig, mode: Mode) -> Vec<Violation> {
    check_run(invs, &run_of(cfg, "check"), mode).expect("check succeeds").violations
}

pub fn first_detection(vs: &[Violation]) -> Option<i64> {
    vs.iter().filter_map(|v| v.detection_step).min()
}

// ---------------------------------------------------------------------------
// Brute-force precondition oracle
//
// Everything below is independent of the engine's condition code: its own
// condition representation, its own evaluator, its own enumeration.

pub const FIELDS: [&str; 4] = ["f0", "f1", "f2", "f3"];
pub const VALUES: [i64; 3] = [0, 1, 2];

/// One record: a value per field, or absent.
pub type Rec = [Option<i64>; 4];

#[derive(Debug, Clone)]
pub struct Instance {
    pub passing: Vec<Vec<Rec>>,
    pub failing: Vec<Vec<Rec>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OKind {
    Constant(i64),
    Consistent,
    Unequal,
    Exist,
}

/// (field index, kind); ordering matches the documented tie order of
/// field name first, then condition type (CONSTANT < CONSISTENT < UNEQUAL
/// < EXIST), then value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OCond {
    pub field: usize,
    pub kind: OKind,
}

impl OCond {
    fn order_key(&self) -> (usize, u8, i64) {
        match self.kind {
            OKind::Constant(v) => (self.field, 0, v),
            OKind::Consistent => (self.field, 1, 0),
            OKind::Unequal => (self.field, 2, 0),
            OKind::Exist => (self.field, 3, 0),
        }
    }

    pub fn holds(&self, ex: &[Rec]) -> bool {
        let vals: Vec<Option<i64>> = ex.iter().map(|r| r[self.field]).collect();
        let present: BTreeSet<i64> = vals.iter().flatten().copied().collect();
        let all = !ex.is_empty() && vals.iter().all(Option::is_some);
        match self.kind {
            OKind::Exist => all,
            OKind::Consistent => all && present.len() == 1,
            OKind::Constant(v) => all && present.len() == 1 && present.contains(&v),
            OKind::Unequal => present.len() >= 2,
        }
    }

    pub fn to_condition(self) -> Condition {
        let f = FIELDS[self.field];
        match self.kind {
            OKind::Constant(v) => Condition::constant(f, v),
            OKind::Consistent => Condition::consistent(f),
            OKind::Unequal => Condition::unequal(f),
            OKind::Exist => Condition::exist(f),
        }
    }
}

pub fn all_conditions() -> Vec<OCond> {
    let mut out = Vec::new();
    for field in 0..FIELDS.len() {
        for v in VALUES {
            out.push(OCond {
                field,
                kind: OKind::Constant(v),
            });
        }
        for kind in [OKind::Consistent, OKind::Unequal, OKind::Exist] {
            out.push(OCond { field, kind });
        }
    }
    out.sort_by_key(OCond::order_key);
    out
}

/// A formula in the oracle's lattice: `common && (q1 || q2 || ...)`, or just
/// `common` when `extra` is empty.
#[derive(Debug, Clone)]
pub struct OFormula {
    pub common: Vec<OCond>,
    pub extra: Vec<OCond>,
}

impl OFormula {
    pub fn holds(&self, ex: &[Rec]) -> bool {
        self.common.iter().all(|c| c.holds(ex)) && (self.extra.is_empty() || self.extra.iter().any(|c| c.holds(ex)))
    }

    fn holds_none(&self, exs: &[Vec<Rec>]) -> bool {
        exs.iter().all(|e| !self.holds(e))
    }

    pub fn safe(&self, inst: &Instance) -> bool {
        inst.passing.iter().all(|e| self.holds(e)) && inst.failing.iter().all(|e| !self.holds(e))
    }

    /// The same formula in disjunctive normal form, as engine types.
    pub fn to_precondition(&self) -> Precondition {
        let common: Vec<Condition> = self.common.iter().map(|c| c.to_condition()).collect();
        if self.extra.is_empty() {
            return Precondition {
                any: vec![Clause::new(common)],
            };
        }
        Precondition {
            any: self
                .extra
                .iter()
                .map(|q| {
                    let mut c = common.clone();
                    c.push(q.to_condition());
                    Clause::new(c)
                })
                .collect(),
        }
    }
}

fn subsets_of_size(n: usize, k: usize, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
        if cur.len() == k {
            return f(cur);
        }
        for i in start..n {
            cur.push(i);
            if go(i + 1, n, k, cur, f) {
                return true;
            }
            cur.pop();
        }
        false
    }
    go(0, n, k, &mut Vec::new(), f)
}

/// Smallest safe formula of the lattice: the shared conjunction alone if it
/// separates, else the shared conjunction with the fewest alternatives
/// (candidates ranked by passing coverage, then tie order) that covers every
/// passing example. `None` when nothing separates.
pub fn oracle(inst: &Instance) -> Option<OFormula> {
    let conds = all_conditions();
    let common: Vec<OCond> = conds
        .iter()
        .copied()
        .filter(|c| inst.passing.iter().all(|e| c.holds(e)))
        .collect();
    let base = OFormula {
        common: common.clone(),
        extra: vec![],
    };
    if base.safe(inst) {
        return Some(base);
    }
    let coverage = |c: &OCond| inst.passing.iter().filter(|e| c.holds(e)).count();
    // A disjunction is safe only if each `common && q` is, so alternatives
    // that are unsafe on their own can never appear.
    let alone_safe = |c: &OCond| {
        OFormula {
            common: common.clone(),
            extra: vec![*c],
        }
        .holds_none(&inst.failing)
    };
    let mut rest: Vec<OCond> = conds
        .iter()
        .copied()
        .filter(|c| !common.contains(c) && coverage(c) > 0 && alone_safe(c))
        .collect();
    rest.sort_by(|a, b| coverage(b).cmp(&coverage(a)).then(a.order_key().cmp(&b.order_key())));
    for k in 1..=inst.passing.len().min(rest.len()) {
        let mut found = None;
        subsets_of_size(rest.len(), k, &mut |idx| {
            let f = OFormula {
                common: common.clone(),
                extra: idx.iter().map(|&i| rest[i]).collect(),
            };
            if f.safe(inst) {
                found = Some(f);
                true
            } else {
                false
            }
        });
        if found.is_some() {
            return found;
        }
    }
    None
}

/// Drops conditions true on every failing example, the oracle's own way.
pub fn oracle_prune(f: &OFormula, inst: &Instance) -> BTreeSet<Condition> {
    f.common
        .iter()
        .filter(|c| inst.failing.iter().any(|e| !c.holds(e)))
        .map(|c| c.to_condition())
        .collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let total = rng.random_range(1..=8usize);
    let n_pass = rng.random_range(1..=total);
    let absent = rng.random_range(0.0..0.3);
    let example = |rng: &mut ChaCha8Rng| -> Vec<Rec> {
        let n = rng.random_range(1..=3usize);
        (0..n)
            .map(|_| {
                let mut r = [None; 4];
                for slot in r.iter_mut() {
                    if !rng.random_bool(absent) {
                        *slot = Some(VALUES[rng.random_range(0..VALUES.len())]);
                    }
                }
                r
            })
            .collect()
    };
    let passing = (0..n_pass).map(|_| example(rng)).collect();
    let failing = (n_pass..total).map(|_| example(rng)).collect();
    Instance { passing, failing }
}

pub fn to_records(ex: &[Rec]) -> Vec<Arc<ExampleRecord>> {
    ex.iter()
        .enumerate()
        .map(|(i, r)| {
            let fields: BTreeMap<String, Value> = r
                .iter()
                .enumerate()
                .filter_map(|(f, v)| v.map(|v| (FIELDS[f].to_string(), Value::Int(v))))
                .collect();
            Arc::new(ExampleRecord {
                pid: i as u64,
                tid: 0,
                ts: 0,
                source: "oracle".into(),
                fields,
            })
        })
        .collect()
}

pub type Examples = Vec<Vec<Arc<ExampleRecord>>>;

pub fn engine_examples(inst: &Instance) -> (Examples, Examples) {
    (
        inst.passing.iter().map(|e| to_records(e)).collect(),
        inst.failing.iter().map(|e| to_records(e)).collect(),
    )
}

/// The engine's formula evaluated by the oracle's own evaluator.
pub fn oracle_eval(p: &Precondition, ex: &[Rec]) -> bool {
    p.any.iter().any(|clause| {
        clause.all.iter().all(|c| {
            let field = FIELDS.iter().position(|f| *f == c.field).expect("oracle field");
            let kind = match c.ctype {
                CondType::Constant => match &c.value {
                    Some(Scalar::Int(v)) => OKind::Constant(*v),
                    other => panic!("unexpected constant {other:?}"),
                },
                CondType::Consistent => OKind::Consistent,
                CondType::Unequal => OKind::Unequal,
                CondType::Exist => OKind::Exist,
            };
            OCond { field, kind }.holds(ex)
        })
    })
}

#[derive(Debug, Default, Clone, Copy)]
pub struct OracleTally {
    pub instances: usize,
    pub unconditional: usize,
    pub conjunction: usize,
    pub disjunction: usize,
    pub inseparable: usize,
    pub prune_checks: usize,
}

/// Checks one instance; returns a description of the first disagreement.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng, tally: &mut OracleTally) -> Result<(), String> {
    tally.instances += 1;
    let (pass, fail) = engine_examples(inst);
    let opts = DeduceOptions::default();
    let got = deduce(&pass, &fail, &opts).map_err(|e| e.to_string())?;
    let split = deduce(
        &pass,
        &fail,
        &DeduceOptions {
            strategy: Strategy::SplitSubgroups,
            ..DeduceOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let want = oracle(inst);

    let tt = |p: &Precondition| -> (Vec<bool>, Vec<bool>) {
        (
            inst.passing.iter().map(|e| oracle_eval(p, e)).collect(),
            inst.failing.iter().map(|e| oracle_eval(p, e)).collect(),
        )
    };

    match (&got, &want) {
        (Deduction::Found(p), Some(w)) => {
            let wp = w.to_precondition();
            if tt(p) != tt(&wp) {
                return Err(format!("truth tables differ: engine {p} vs oracle {wp}"));
            }
            if !(inst.passing.iter().all(|e| oracle_eval(p, e)) && inst.failing.iter().all(|e| !oracle_eval(p, e))) {
                return Err(format!("engine result {p} is not safe"));
            }
            if !is_safe(p, &pass, &fail) {
                return Err(format!("engine disagrees with itself on safety of {p}"));
            }
            if inst.failing.is_empty() {
                tally.unconditional += 1;
                if !p.is_trivially_true() {
                    return Err(format!("no failing examples but got {p}"));
                }
            } else if w.extra.is_empty() {
                tally.conjunction += 1;
                let expected = oracle_prune(w, inst);
                let actual: BTreeSet<Condition> = p.any.iter().flat_map(|c| c.all.iter().cloned()).collect();
                if p.any.len() != 1 || actual != expected {
                    return Err(format!("conjunction case: engine {p}, oracle (pruned) {expected:?}"));
                }
            } else {
                tally.disjunction += 1;
            }
            // Pruning the oracle's formula keeps it safe.
            let pruned = prune(&wp, &fail);
            tally.prune_checks += 1;
            if !is_safe(&pruned, &pass, &fail) {
                return Err(format!("prune broke safety of {wp}: {pruned}"));
            }
        }
        (Deduction::Found(p), None) => return Err(format!("engine found {p} where the oracle finds nothing")),
        (Deduction::BudgetExhausted, _) => return Err("budget exhausted on a tiny instance".into()),
        (Deduction::Inseparable, Some(w)) => {
            return Err(format!("engine gave up, oracle has {}", w.to_precondition()))
        }
        (Deduction::Inseparable, None) => tally.inseparable += 1,
    }

    match (&got, &split) {
        (_, Deduction::Found(s)) if !is_safe(s, &pass, &fail) => return Err(format!("split result {s} unsafe")),
        (Deduction::Found(_), Deduction::Found(_)) | (Deduction::Inseparable, _) => {}
        (g, s) => return Err(format!("augment {g:?} but split {s:?}")),
    }

    // Random formulas over the candidate space: whenever one is safe, its
    // pruned version must be too.
    let conds = all_conditions();
    for _ in 0..8 {
        let clauses = (0..rng.random_range(1..=3))
            .map(|_| {
                let n = rng.random_range(0..=3);
                Clause::new((0..n).map(|_| conds[rng.random_range(0..conds.len())].to_condition()).collect())
            })
            .collect();
        let p = Precondition { any: clauses };
        if is_safe(&p, &pass, &fail) {
            tally.prune_checks += 1;
            if !is_safe(&prune(&p, &fail), &pass, &fail) {
                return Err(format!("prune broke safety of random {p}"));
            }
        }
    }
    Ok(())
}

pub fn run_oracle(n: usize, seed: u64) -> (OracleTally, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = OracleTally::default();
    let mut failures = Vec::new();
    for i in 0..n {
        let inst = random_instance(&mut rng);
        if let Err(e) = check_instance(&inst, &mut rng, &mut tally) {
            failures.push(format!("instance {i}: {e}\n  {inst:?}"));
        }
    }
    (tally, failures)
}

// ---------------------------------------------------------------------------
// Hand-built records

pub fn meta(step: i64, extra: &[(&str, i64)]) -> BTreeMap<String, Scalar> {
    let mut m = BTreeMap::from([("step".to_string(), Scalar::Int(step))]);
    for (k, v) in extra {
        m.insert(k.to_string(), Scalar::Int(*v));
    }
    m
}

pub fn var_rec(pid: u64, ts: u64, meta: BTreeMap<String, Scalar>, var_type: &str, var_id: &str, attr: &str, value: Value) -> TraceRecord {
    TraceRecord {
        ts,
        pid,
        tid: 0,
        meta,
        body: RecordBody::VarState {
            var_type: var_type.into(),
            var_id: var_id.into(),
            attr: attr.into(),
            value,
        },
    }
}

pub fn entry_rec(pid: u64, ts: u64, meta: BTreeMap<String, Scalar>, func: &str, args: Vec<Value>) -> TraceRecord {
    TraceRecord {
        ts,
        pid,
        tid: 0,
        meta,
        body: RecordBody::Entry {
            func: func.into(),
            args,
        },
    }
}

pub fn exit_rec(pid: u64, ts: u64, meta: BTreeMap<String, Scalar>, func: &str, ret: Value) -> TraceRecord {
    TraceRecord {
        ts,
        pid,
        tid: 0,
        meta,
        body: RecordBody::Exit {
            func: func.into(),
            ret,
            exception: None,
        },
    }
}

/// A call with no children: entry at `ts`, exit at `ts + 1`.
pub fn call(pid: u64, ts: u64, step: i64, func: &str, args: Vec<Value>, ret: Value) -> [TraceRecord; 2] {
    [
        entry_rec(pid, ts, meta(step, &[]), func, args),
        exit_rec(pid, ts + 1, meta(step, &[]), func, ret),
    ]
}
