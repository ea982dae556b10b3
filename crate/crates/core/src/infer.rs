//! The inference loop: propose hypotheses from every run, collect examples
//! from every run, deduce a precondition, keep what survives.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Result, Warning, WarningKind};
use crate::invariant::{sort_invariants, Invariant, Stats};
use crate::precondition::{blocklist_for, deduce, DeduceOptions, Deduction, Precondition, Strategy};
use crate::relation::{Example, GenOptions, Registry, Relation, RelationKind, RelationTemplate};
use crate::trace::Run;
use crate::units::RunIndex;

#[derive(Debug, Clone)]
pub struct InferConfig {
    pub relations: Vec<RelationKind>,
    pub gen: GenOptions,
    /// Safety checks allowed per hypothesis.
    pub budget: usize,
    /// Examples stored per hypothesis, split evenly between verdicts.
    pub max_examples: usize,
    pub strategy: Strategy,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            relations: RelationKind::ALL.to_vec(),
            gen: GenOptions::default(),
            budget: 1000,
            max_examples: 10_000,
            strategy: Strategy::Augment,
        }
    }
}

/// Counters describing what happened to the hypotheses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferStats {
    pub hypotheses: usize,
    pub invariants: usize,
    /// Failing examples and no separating precondition.
    pub superficial: usize,
    pub budget_exhausted: usize,
    /// Never held anywhere.
    pub no_passing: usize,
    /// Deduced on a sample, then contradicted by the unsampled examples.
    pub unstable: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Inference {
    pub invariants: Vec<Invariant>,
    pub warnings: Vec<Warning>,
    pub stats: InferStats,
}

/// Uniform sample of a stream of examples, reproducible per seed.
struct Reservoir {
    cap: usize,
    seen: u64,
    items: Vec<Example>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(cap: usize, seed: [u8; 32]) -> Self {
        Reservoir {
            cap,
            seen: 0,
            items: Vec::new(),
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    fn push(&mut self, e: Example) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(e);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.cap {
                self.items[j as usize] = e;
            }
        }
    }

    fn complete(&self) -> bool {
        self.seen as usize == self.items.len()
    }
}

fn seed(id: &str, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(id.as_bytes());
    h.update([0]);
    h.update(tag.as_bytes());
    h.finalize().into()
}

/// Re-deduction rounds when sampled examples are contradicted by the rest.
const REFINE_ROUNDS: usize = 4;

enum Outcome {
    Kept(Box<Invariant>),
    NoPassing,
    Superficial,
    Budget,
    Unstable,
}

struct Hypo<'a> {
    template: &'a Arc<dyn RelationTemplate>,
    rel: Relation,
}

fn for_each_example(h: &Hypo<'_>, runs: &[RunIndex], sink: &mut dyn FnMut(Example)) -> Result<()> {
    for run in runs {
        h.template.examples(&h.rel, run, sink)?;
    }
    Ok(())
}

fn judge(h: &Hypo<'_>, runs: &[RunIndex], cfg: &InferConfig, opts: &DeduceOptions) -> Result<Outcome> {
    let id = h.rel.id();
    let cap = (cfg.max_examples / 2).max(1);
    let mut passing = Reservoir::new(cap, seed(&id, "passing"));
    let mut failing = Reservoir::new(cap, seed(&id, "failing"));
    for_each_example(h, runs, &mut |e| {
        if e.is_passing() {
            passing.push(e)
        } else {
            failing.push(e)
        }
    })?;
    if passing.seen == 0 {
        return Ok(Outcome::NoPassing);
    }
    let stats = Stats {
        passing: passing.seen,
        failing: failing.seen,
    };
    let exact = passing.complete() && failing.complete();
    let (mut pos, mut neg) = (passing.items, failing.items);
    for _ in 0..REFINE_ROUNDS {
        let pre = match deduce(&pos, &neg, opts)? {
            Deduction::Found(p) => p,
            Deduction::Inseparable => return Ok(Outcome::Superficial),
            Deduction::BudgetExhausted => return Ok(Outcome::Budget),
        };
        if exact {
            return Ok(Outcome::Kept(Box::new(keep(h, runs, pre, stats))));
        }
        // The sample may miss the examples that break the precondition.
        let (mut extra_pos, mut extra_neg) = (Vec::new(), Vec::new());
        for_each_example(h, runs, &mut |e| {
            let holds = pre.eval(&e.records);
            if e.is_passing() && !holds && extra_pos.len() < cap {
                extra_pos.push(e);
            } else if !e.is_passing() && holds && extra_neg.len() < cap {
                extra_neg.push(e);
            }
        })?;
        if extra_pos.is_empty() && extra_neg.is_empty() {
            return Ok(Outcome::Kept(Box::new(keep(h, runs, pre, stats))));
        }
        pos.extend(extra_pos);
        neg.extend(extra_neg);
    }
    Ok(Outcome::Unstable)
}

fn keep(h: &Hypo<'_>, runs: &[RunIndex], pre: Precondition, stats: Stats) -> Invariant {
    let ids = runs.iter().map(|r| r.run_id.clone()).collect();
    Invariant::new(&h.rel, pre, stats, ids)
}

/// Infers invariants from parsed runs.
pub fn infer(runs: &[Run], registry: &Registry, cfg: &InferConfig) -> Result<Inference> {
    let indices: Vec<RunIndex> = runs.par_iter().map(RunIndex::build).collect::<Result<_>>()?;
    infer_indexed(&indices, registry, cfg)
}

/// [`infer`] over already indexed runs.
pub fn infer_indexed(runs: &[RunIndex], registry: &Registry, cfg: &InferConfig) -> Result<Inference> {
    let mut warnings: Vec<Warning> = runs.iter().flat_map(|r| r.warnings.iter().cloned()).collect();

    let mut digest_attrs: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in runs {
        for (t, attrs) in &r.digest_attrs {
            digest_attrs.entry(t.clone()).or_default().extend(attrs.iter().cloned());
        }
    }

    let kinds: BTreeSet<RelationKind> = cfg.relations.iter().copied().collect();
    let mut hypos: Vec<Hypo<'_>> = Vec::new();
    for kind in kinds {
        let Some(template) = registry.get(kind) else { continue };
        let per_run: Vec<BTreeSet<Relation>> = runs.par_iter().map(|r| template.hypotheses(r, &cfg.gen)).collect();
        let mut all: BTreeSet<Relation> = per_run.into_iter().flatten().collect();
        while all.len() > cfg.gen.max_hypotheses {
            all.pop_last();
        }
        hypos.extend(all.into_iter().map(|rel| Hypo { template, rel }));
    }

    let outcomes: Vec<Outcome> = hypos
        .par_iter()
        .map(|h| {
            let opts = DeduceOptions {
                budget: cfg.budget,
                strategy: cfg.strategy,
                blocklist: blocklist_for(&h.rel, &digest_attrs),
            };
            judge(h, runs, cfg, &opts)
        })
        .collect::<Result<_>>()?;

    let mut stats = InferStats {
        hypotheses: hypos.len(),
        ..Default::default()
    };
    let mut invariants = Vec::new();
    for (h, o) in hypos.iter().zip(outcomes) {
        match o {
            Outcome::Kept(inv) => invariants.push(*inv),
            Outcome::NoPassing => stats.no_passing += 1,
            Outcome::Superficial => stats.superficial += 1,
            Outcome::Unstable => stats.unstable += 1,
            Outcome::Budget => {
                stats.budget_exhausted += 1;
                warnings.push(Warning::new(
                    WarningKind::BudgetExhausted,
                    format!("{}: precondition search ran out of budget", h.rel.id()),
                ));
            }
        }
    }
    stats.invariants = invariants.len();
    sort_invariants(&mut invariants);
    Ok(Inference {
        invariants,
        warnings,
        stats,
    })
}
