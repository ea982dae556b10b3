//! Preconditions: disjunctions of conjunctions of field conditions.

mod deduce;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::relation::{ExampleRecord, HasRecords, OutputBound, Relation};
use crate::units::META_PREFIX;
use crate::value::{Scalar, Value};

pub use deduce::{deduce, is_safe, is_superficial, prune, DeduceOptions, Deduction, Strategy};

/// Declaration order is the tie-break order used when ranking conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CondType {
    Constant,
    Consistent,
    Unequal,
    Exist,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    #[serde(rename = "f")]
    pub field: String,
    #[serde(rename = "t")]
    pub ctype: CondType,
    /// Required value; set for CONSTANT only.
    #[serde(rename = "v", default, skip_serializing_if = "Option::is_none", deserialize_with = "present")]
    pub value: Option<Scalar>,
}

// Distinguishes `"v": null` (a CONSTANT None) from a missing key.
fn present<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Scalar>, D::Error> {
    Scalar::deserialize(d).map(Some)
}

impl Condition {
    pub fn constant(field: impl Into<String>, value: impl Into<Scalar>) -> Self {
        Condition {
            field: field.into(),
            ctype: CondType::Constant,
            value: Some(value.into()),
        }
    }

    pub fn consistent(field: impl Into<String>) -> Self {
        Self::untyped(field, CondType::Consistent)
    }

    pub fn unequal(field: impl Into<String>) -> Self {
        Self::untyped(field, CondType::Unequal)
    }

    pub fn exist(field: impl Into<String>) -> Self {
        Self::untyped(field, CondType::Exist)
    }

    fn untyped(field: impl Into<String>, ctype: CondType) -> Self {
        Condition {
            field: field.into(),
            ctype,
            value: None,
        }
    }

    /// Evaluates the condition over all records of one example.
    pub fn eval(&self, records: &[Arc<ExampleRecord>]) -> bool {
        if records.is_empty() {
            return false;
        }
        let mut values = records.iter().map(|r| r.get(&self.field));
        match self.ctype {
            CondType::Exist => values.all(|v| v.is_some()),
            CondType::Consistent => {
                let first = records[0].get(&self.field);
                first.is_some() && values.all(|v| v == first)
            }
            CondType::Constant => {
                let Some(expected) = self.value.clone().map(Value::from) else {
                    return false;
                };
                values.all(|v| v == Some(&expected))
            }
            CondType::Unequal => {
                let mut present = values.flatten();
                match present.next() {
                    Some(first) => present.any(|v| v != first),
                    None => false,
                }
            }
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.ctype {
            CondType::Constant => "CONSTANT",
            CondType::Consistent => "CONSISTENT",
            CondType::Unequal => "UNEQUAL",
            CondType::Exist => "EXIST",
        };
        match &self.value {
            Some(v) => write!(f, "{name}({}, {v})", self.field),
            None => write!(f, "{name}({})", self.field),
        }
    }
}

/// Conjunction of conditions. An empty clause is true.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Clause {
    pub all: Vec<Condition>,
}

impl Clause {
    pub fn new(mut conds: Vec<Condition>) -> Self {
        conds.sort();
        conds.dedup();
        Clause { all: conds }
    }

    pub fn eval(&self, records: &[Arc<ExampleRecord>]) -> bool {
        self.all.iter().all(|c| c.eval(records))
    }
}

impl fmt::Display for Clause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.all.is_empty() {
            return f.write_str("true");
        }
        let parts: Vec<String> = self.all.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" && "))
    }
}

/// Disjunction of clauses. `{"any":[{"all":[]}]}` is the trivially true
/// precondition of an unconditional invariant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Precondition {
    pub any: Vec<Clause>,
}

impl Precondition {
    pub fn trivially_true() -> Self {
        Precondition {
            any: vec![Clause::default()],
        }
    }

    pub fn is_trivially_true(&self) -> bool {
        self.any.iter().any(|c| c.all.is_empty())
    }

    pub fn eval(&self, records: &[Arc<ExampleRecord>]) -> bool {
        self.satisfied_clause(records).is_some()
    }

    /// Index of the first clause that holds.
    pub fn satisfied_clause(&self, records: &[Arc<ExampleRecord>]) -> Option<usize> {
        self.any.iter().position(|c| c.eval(records))
    }

    pub fn fields(&self) -> BTreeSet<&str> {
        self.any
            .iter()
            .flat_map(|c| c.all.iter().map(|x| x.field.as_str()))
            .collect()
    }
}

impl fmt::Display for Precondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.any.is_empty() {
            return f.write_str("false");
        }
        let parts: Vec<String> = if self.any.len() == 1 {
            vec![self.any[0].to_string()]
        } else {
            self.any.iter().map(|c| format!("({c})")).collect()
        };
        f.write_str(&parts.join(" || "))
    }
}

/// Fields a hypothesis may not use in its precondition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    /// Blocked fields; a blocked `x` also blocks `x.<anything>`.
    pub blocked: BTreeSet<String>,
    /// Fields never turned into CONSTANT conditions.
    pub no_constant: BTreeSet<String>,
}

/// Counter-like meta variables: their concrete values identify a position in
/// one run rather than a training context.
pub const COUNTER_FIELDS: [&str; 2] = ["meta_vars.step", "meta_vars.epoch"];

impl Blocklist {
    pub fn standard() -> Self {
        Blocklist {
            blocked: BTreeSet::new(),
            no_constant: COUNTER_FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn block(&mut self, field: impl Into<String>) {
        self.blocked.insert(field.into());
    }

    pub fn is_blocked(&self, field: &str) -> bool {
        self.blocked.contains(field)
            || self
                .blocked
                .iter()
                .any(|b| field.len() > b.len() && field.starts_with(b.as_str()) && field.as_bytes()[b.len()] == b'.')
    }

    pub fn allows_constant(&self, field: &str) -> bool {
        !self.no_constant.contains(field)
    }
}

/// The relation's own blocklist on top of [`Blocklist::standard`].
///
/// A Consistent invariant over a tensor-valued attribute may not use any
/// tensor-valued attribute of the same variable type; every other relation
/// blocks only the fields it examines itself.
pub fn blocklist_for(rel: &Relation, digest_attrs: &BTreeMap<String, BTreeSet<String>>) -> Blocklist {
    let mut b = Blocklist::standard();
    match rel {
        Relation::Consistent { left, right } => {
            for d in [left, right] {
                b.block(&d.attr);
                let tensors = digest_attrs.get(&d.var_type);
                if tensors.is_some_and(|t| t.contains(&d.attr)) {
                    for a in tensors.into_iter().flatten() {
                        b.block(a);
                    }
                }
            }
        }
        Relation::EventContain { .. } | Relation::ApiSequence { .. } => {}
        Relation::ApiArg { arg, .. } => b.block(format!("args.{arg}")),
        Relation::ApiOutput { bound, .. } => {
            if let OutputBound::EqualsInputAttr { attr, arg } = bound {
                b.block(format!("args.{arg}.{attr}"));
            }
        }
    }
    b
}

/// Every condition that holds on the example, over fields not blocked.
///
/// CONSTANT is only produced for scalar values (never tensor digests or
/// structs) and never for counter fields.
pub fn conditions_of<E: HasRecords + ?Sized>(example: &E, blocklist: &Blocklist) -> Result<BTreeSet<Condition>> {
    let records = example.records();
    if records.is_empty() {
        return Err(Error::EmptyExample);
    }
    let fields: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.fields.keys().map(String::as_str))
        .filter(|f| !blocklist.is_blocked(f))
        .collect();
    let mut out = BTreeSet::new();
    for field in fields {
        let values: Vec<Option<&Value>> = records.iter().map(|r| r.get(field)).collect();
        let present: Vec<&Value> = values.iter().flatten().copied().collect();
        let all_present = present.len() == values.len();
        let first = present[0];
        let identical = present.iter().all(|v| *v == first);
        if all_present {
            out.insert(Condition::exist(field));
            if identical {
                out.insert(Condition::consistent(field));
                if let Some(s) = first.as_scalar() {
                    if blocklist.allows_constant(field) {
                        out.insert(Condition::constant(field, s));
                    }
                }
            }
        }
        if !identical {
            out.insert(Condition::unequal(field));
        }
    }
    Ok(out)
}

/// Shorthand used in tests and docs: a meta-variable field path.
pub fn meta_field(key: &str) -> String {
    format!("{META_PREFIX}{key}")
}
