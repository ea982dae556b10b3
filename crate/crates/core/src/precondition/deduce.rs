//! Precondition deduction from passing and failing examples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precondition::{conditions_of, Blocklist, Clause, Condition, Precondition};
use crate::relation::HasRecords;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Extend the shared conjunction with one extra condition per clause,
    /// trying conditions in decreasing passing coverage.
    #[default]
    Augment,
    /// Repeatedly carve out the subgroup of uncovered passing examples that
    /// share the best-covering condition and use that subgroup's full
    /// shared conjunction as a clause.
    SplitSubgroups,
}

#[derive(Debug, Clone)]
pub struct DeduceOptions {
    /// Maximum number of safety checks.
    pub budget: usize,
    pub strategy: Strategy,
    pub blocklist: Blocklist,
}

impl Default for DeduceOptions {
    fn default() -> Self {
        DeduceOptions {
            budget: 1000,
            strategy: Strategy::Augment,
            blocklist: Blocklist::standard(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Deduction {
    Found(Precondition),
    /// No formula in the search space separates the examples.
    Inseparable,
    BudgetExhausted,
}

impl Deduction {
    pub fn precondition(&self) -> Option<&Precondition> {
        match self {
            Deduction::Found(p) => Some(p),
            _ => None,
        }
    }

    pub fn into_precondition(self) -> Option<Precondition> {
        match self {
            Deduction::Found(p) => Some(p),
            _ => None,
        }
    }
}

/// A hypothesis is superficial when it has failing examples but no
/// precondition could be deduced for it.
pub fn is_superficial(failing: usize, result: &Deduction) -> bool {
    failing > 0 && result.precondition().is_none()
}

/// True on every passing example and false on every failing one.
pub fn is_safe<E: HasRecords>(p: &Precondition, passing: &[E], failing: &[E]) -> bool {
    passing.iter().all(|e| p.eval(e.records())) && failing.iter().all(|e| !p.eval(e.records()))
}

/// Drops every condition that holds on all failing examples (it cannot be
/// what separates them) and merges duplicate clauses.
pub fn prune<E: HasRecords>(p: &Precondition, failing: &[E]) -> Precondition {
    if failing.is_empty() {
        return p.clone();
    }
    let mut any: Vec<Clause> = Vec::new();
    for clause in &p.any {
        let kept: Vec<Condition> = clause
            .all
            .iter()
            .filter(|c| failing.iter().any(|f| !c.eval(f.records())))
            .cloned()
            .collect();
        let clause = Clause::new(kept);
        if !any.contains(&clause) {
            any.push(clause);
        }
    }
    Precondition { any }
}

type Id = u32;

/// Condition sets of all examples with conditions interned to integers.
struct Table {
    conds: Vec<Condition>,
    passing: Vec<Vec<Id>>,
    failing: Vec<Vec<Id>>,
}

fn contains(set: &[Id], id: Id) -> bool {
    set.binary_search(&id).is_ok()
}

fn subset(small: &[Id], big: &[Id]) -> bool {
    small.iter().all(|&x| contains(big, x))
}

fn intersect(a: &[Id], b: &[Id]) -> Vec<Id> {
    a.iter().copied().filter(|&x| contains(b, x)).collect()
}

impl Table {
    fn build<E: HasRecords>(passing: &[E], failing: &[E], blocklist: &Blocklist) -> Result<Table> {
        let mut ids: BTreeMap<Condition, Id> = BTreeMap::new();
        let mut passing_sets = Vec::with_capacity(passing.len());
        let mut sets = Vec::with_capacity(passing.len());
        for e in passing {
            sets.push(conditions_of(e, blocklist)?);
        }
        for s in &sets {
            for c in s {
                let next = ids.len() as Id;
                ids.entry(c.clone()).or_insert(next);
            }
        }
        // Re-number in condition order so that id order equals tie order.
        let conds: Vec<Condition> = ids.keys().cloned().collect();
        for (i, c) in conds.iter().enumerate() {
            ids.insert(c.clone(), i as Id);
        }
        for s in sets {
            passing_sets.push(s.iter().map(|c| ids[c]).collect());
        }
        let mut failing_sets = Vec::with_capacity(failing.len());
        for e in failing {
            let mut v: Vec<Id> = conditions_of(e, blocklist)?
                .iter()
                .filter_map(|c| ids.get(c).copied())
                .collect();
            v.sort_unstable();
            failing_sets.push(v);
        }
        Ok(Table {
            conds,
            passing: passing_sets,
            failing: failing_sets,
        })
    }

    /// Failing examples on which the conjunction `k` holds.
    fn survivors(&self, k: &[Id]) -> Vec<usize> {
        (0..self.failing.len()).filter(|&j| subset(k, &self.failing[j])).collect()
    }

    fn clause(&self, ids: &[Id]) -> Clause {
        Clause::new(ids.iter().map(|&i| self.conds[i as usize].clone()).collect())
    }
}

struct Budget {
    left: usize,
}

impl Budget {
    fn spend(&mut self) -> bool {
        if self.left == 0 {
            return false;
        }
        self.left -= 1;
        true
    }
}

/// Deduces a precondition that is true on every passing example and false
/// on every failing one.
///
/// With no failing examples the invariant is unconditional. Otherwise the
/// candidate is the conjunction of the conditions shared by all passing
/// examples; if that is unsafe, clauses are added per the chosen strategy
/// until the passing examples are covered. The result is pruned of
/// conditions that hold on every failing example.
pub fn deduce<E: HasRecords>(passing: &[E], failing: &[E], opts: &DeduceOptions) -> Result<Deduction> {
    if passing.is_empty() {
        return Err(Error::NoPassingExamples);
    }
    if failing.is_empty() {
        for e in passing {
            if e.records().is_empty() {
                return Err(Error::EmptyExample);
            }
        }
        return Ok(Deduction::Found(Precondition::trivially_true()));
    }
    let table = Table::build(passing, failing, &opts.blocklist)?;
    let mut budget = Budget { left: opts.budget };

    let mut common = table.passing[0].clone();
    for s in &table.passing[1..] {
        common = intersect(&common, s);
    }
    if !budget.spend() {
        return Ok(Deduction::BudgetExhausted);
    }
    let survivors = table.survivors(&common);
    let clauses = if survivors.is_empty() {
        vec![common]
    } else {
        let found = match opts.strategy {
            Strategy::Augment => augment(&table, &common, &survivors, &mut budget),
            Strategy::SplitSubgroups => split(&table, &common, &survivors, &mut budget),
        };
        match found {
            Ok(Some(c)) => c,
            Ok(None) => return Ok(Deduction::Inseparable),
            Err(()) => return Ok(Deduction::BudgetExhausted),
        }
    };
    Ok(Deduction::Found(finish(&table, clauses)))
}

/// Prunes non-discriminating conditions, then drops duplicate clauses and
/// clauses implied by a weaker one.
fn finish(table: &Table, clauses: Vec<Vec<Id>>) -> Precondition {
    let discriminating = |id: Id| table.failing.iter().any(|f| !contains(f, id));
    let mut pruned: Vec<Vec<Id>> = Vec::new();
    for c in clauses {
        let kept: Vec<Id> = c.into_iter().filter(|&id| discriminating(id)).collect();
        if !pruned.contains(&kept) {
            pruned.push(kept);
        }
    }
    let keep: Vec<bool> = pruned
        .iter()
        .enumerate()
        .map(|(i, c)| {
            !pruned
                .iter()
                .enumerate()
                .any(|(j, d)| j != i && d.len() < c.len() && subset(d, c))
        })
        .collect();
    Precondition {
        any: pruned
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(c, _)| table.clause(c))
            .collect(),
    }
}

/// `Err(())` means the budget ran out.
type Search = std::result::Result<Option<Vec<Vec<Id>>>, ()>;

fn with(common: &[Id], q: Id) -> Vec<Id> {
    let mut k = common.to_vec();
    if let Err(pos) = k.binary_search(&q) {
        k.insert(pos, q);
    }
    k
}

fn augment(table: &Table, common: &[Id], survivors: &[usize], budget: &mut Budget) -> Search {
    let n = table.passing.len();
    let mut postings: BTreeMap<Id, Vec<usize>> = BTreeMap::new();
    for (i, s) in table.passing.iter().enumerate() {
        for &id in s {
            if !contains(common, id) {
                postings.entry(id).or_default().push(i);
            }
        }
    }
    let mut ranked: Vec<(Id, Vec<usize>)> = postings.into_iter().collect();
    // Coverage descending; ids already follow (field, type, value) order.
    ranked.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut covered = vec![false; n];
    let mut uncovered = n;
    let mut clauses = Vec::new();
    for (q, hits) in ranked {
        if !hits.iter().any(|&i| !covered[i]) {
            continue;
        }
        if !budget.spend() {
            return Err(());
        }
        let safe = survivors.iter().all(|&j| !contains(&table.failing[j], q));
        if safe {
            clauses.push(with(common, q));
            for i in hits {
                if !covered[i] {
                    covered[i] = true;
                    uncovered -= 1;
                }
            }
            if uncovered == 0 {
                return Ok(Some(clauses));
            }
        }
    }
    Ok(None)
}

fn split(table: &Table, common: &[Id], survivors: &[usize], budget: &mut Budget) -> Search {
    let n = table.passing.len();
    let mut covered = vec![false; n];
    let mut clauses: Vec<Vec<Id>> = Vec::new();
    let safe = |k: &[Id]| survivors.iter().all(|&j| !subset(k, &table.failing[j]));

    while let Some(first) = covered.iter().position(|c| !c) {
        let mut counts: BTreeMap<Id, usize> = BTreeMap::new();
        for (i, s) in table.passing.iter().enumerate() {
            if covered[i] {
                continue;
            }
            for &id in s {
                if !contains(common, id) {
                    *counts.entry(id).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(Id, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut chosen: Option<Vec<Id>> = None;
        for (q, _) in ranked {
            if !budget.spend() {
                return Err(());
            }
            let mut group = (0..n).filter(|&i| !covered[i] && contains(&table.passing[i], q));
            let g0 = group.next().expect("count > 0");
            let k = group.fold(table.passing[g0].clone(), |acc, i| intersect(&acc, &table.passing[i]));
            if safe(&k) {
                chosen = Some(k);
                break;
            }
        }
        let k = match chosen {
            Some(k) => k,
            None => {
                // Any clause true on `first` is a subset of its conditions; if
                // the full set is unsafe nothing can cover it.
                if !budget.spend() {
                    return Err(());
                }
                let k = table.passing[first].clone();
                if !safe(&k) {
                    return Ok(None);
                }
                k
            }
        };
        for (c, p) in covered.iter_mut().zip(&table.passing) {
            if !*c && subset(&k, p) {
                *c = true;
            }
        }
        clauses.push(k);
    }
    Ok(Some(clauses))
}
