//! Inferred invariants and the invariant file.

use std::cmp::Reverse;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::precondition::Precondition;
use crate::relation::{Params, Relation, RelationKind};

/// Version of the invariant file layout.
pub const INVARIANT_SCHEMA: u64 = 1;

pub fn engine_version() -> String {
    format!("trainvar {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub passing: u64,
    pub failing: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub runs: Vec<String>,
    pub engine: String,
}

/// A relation instance that held on every training run, under its precondition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invariant {
    pub id: String,
    pub relation: RelationKind,
    #[serde(default)]
    pub params: Params,
    pub descriptors: Vec<Descriptor>,
    pub precondition: Precondition,
    pub stats: Stats,
    pub provenance: Provenance,
}

impl Invariant {
    pub fn new(rel: &Relation, precondition: Precondition, stats: Stats, runs: Vec<String>) -> Self {
        Invariant {
            id: rel.id(),
            relation: rel.kind(),
            params: rel.params(),
            descriptors: rel.descriptors(),
            precondition,
            stats,
            provenance: Provenance {
                runs,
                engine: engine_version(),
            },
        }
    }

    /// Rebuilds the relation instance, validating arity and parameters.
    pub fn to_relation(&self) -> Result<Relation> {
        Relation::from_parts(self.relation, &self.params, &self.descriptors)
    }

    /// Number of value constraints carried by the descriptors.
    pub fn specificity(&self) -> usize {
        self.descriptors
            .iter()
            .map(|d| match d {
                Descriptor::Api(a) => a.args.len() + usize::from(a.ret.is_some()),
                Descriptor::Var(v) => v
                    .change
                    .as_ref()
                    .map_or(0, |c| usize::from(c.old.is_some()) + usize::from(c.new.is_some())),
            })
            .sum()
    }

    fn output_key(&self) -> (&'static str, Vec<String>, &str) {
        (
            self.relation.name(),
            self.descriptors.iter().map(ToString::to_string).collect(),
            &self.id,
        )
    }
}

/// Canonical output order: relation name, descriptor names, id.
pub fn sort_invariants(invs: &mut [Invariant]) {
    invs.sort_by_cached_key(|i| {
        let (a, b, c) = i.output_key();
        (a, b, c.to_string())
    });
}

/// Keeps at most `cap` invariants, chosen by relation (in the order of
/// [`RelationKind::ALL`]), then more specific descriptors, then more passing
/// examples, then id. The survivors keep canonical output order.
pub fn apply_cap(invs: Vec<Invariant>, cap: usize) -> Vec<Invariant> {
    if invs.len() <= cap {
        return invs;
    }
    let rank = |k: RelationKind| RelationKind::ALL.iter().position(|x| *x == k).unwrap_or(usize::MAX);
    let mut ranked = invs;
    ranked.sort_by_cached_key(|i| {
        (
            rank(i.relation),
            Reverse(i.specificity()),
            Reverse(i.stats.passing),
            i.id.clone(),
        )
    });
    ranked.truncate(cap);
    sort_invariants(&mut ranked);
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantFile {
    pub schema: u64,
    pub engine: String,
    pub invariants: Vec<Invariant>,
}

impl InvariantFile {
    pub fn new(invariants: Vec<Invariant>) -> Self {
        InvariantFile {
            schema: INVARIANT_SCHEMA,
            engine: engine_version(),
            invariants,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let schema = raw
            .get("schema")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::InvariantFile("missing `schema`".into()))?;
        if schema != INVARIANT_SCHEMA {
            return Err(Error::SchemaVersionMismatch {
                found: schema,
                expected: INVARIANT_SCHEMA,
            });
        }
        let file: InvariantFile = serde_json::from_value(raw)?;
        for inv in &file.invariants {
            let rel = inv
                .to_relation()
                .map_err(|e| Error::InvariantFile(format!("{}: {e}", inv.id)))?;
            if rel.id() != inv.id {
                return Err(Error::InvariantFile(format!(
                    "id `{}` does not match its relation `{}`",
                    inv.id,
                    rel.id()
                )));
            }
        }
        Ok(file)
    }

    /// Pretty JSON with a trailing newline; stable across runs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("invariant file serializes");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}
