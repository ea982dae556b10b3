//! Relation templates, their instances, and example semantics.

mod registry;
mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::descriptor::{ApiDescriptor, Descriptor, VarDescriptor};
use crate::error::{Error, Result};
use crate::trace::StepKey;
use crate::value::Value;

pub use registry::{GenOptions, Registry, RelationTemplate};
pub(crate) use templates::{arg_example, consistent_examples, output_example, span_example, window_example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    Consistent,
    EventContain,
    #[serde(rename = "APISequence")]
    ApiSequence,
    #[serde(rename = "APIArg")]
    ApiArg,
    #[serde(rename = "APIOutput")]
    ApiOutput,
}

impl RelationKind {
    pub const ALL: [RelationKind; 5] = [
        RelationKind::Consistent,
        RelationKind::EventContain,
        RelationKind::ApiSequence,
        RelationKind::ApiArg,
        RelationKind::ApiOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::Consistent => "Consistent",
            RelationKind::EventContain => "EventContain",
            RelationKind::ApiSequence => "APISequence",
            RelationKind::ApiArg => "APIArg",
            RelationKind::ApiOutput => "APIOutput",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        RelationKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BoundType {
    EqualsInputAttr,
    ConstantAttr,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutputBound {
    /// `ret.<attr> == args[arg].<attr>`
    EqualsInputAttr { attr: String, arg: usize },
    /// `ret.<attr> == value`
    ConstantAttr { attr: String, value: Value },
}

/// A relation template instantiated with descriptors and parameters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    Consistent { left: VarDescriptor, right: VarDescriptor },
    EventContain { parent: ApiDescriptor, child: Descriptor },
    ApiSequence { apis: Vec<ApiDescriptor> },
    ApiArg { api: ApiDescriptor, arg: usize, is_distinct: bool },
    ApiOutput { api: ApiDescriptor, bound: OutputBound },
}

/// Relation-specific parameters as they appear in the invariant file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arg: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_distinct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_type: Option<BoundType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
}

impl Relation {
    /// Consistent is symmetric; descriptors are stored in sorted order.
    pub fn consistent(a: VarDescriptor, b: VarDescriptor) -> Self {
        let (left, right) = if a <= b { (a, b) } else { (b, a) };
        Relation::Consistent { left, right }
    }

    pub fn kind(&self) -> RelationKind {
        match self {
            Relation::Consistent { .. } => RelationKind::Consistent,
            Relation::EventContain { .. } => RelationKind::EventContain,
            Relation::ApiSequence { .. } => RelationKind::ApiSequence,
            Relation::ApiArg { .. } => RelationKind::ApiArg,
            Relation::ApiOutput { .. } => RelationKind::ApiOutput,
        }
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        match self {
            Relation::Consistent { left, right } => vec![left.clone().into(), right.clone().into()],
            Relation::EventContain { parent, child } => vec![parent.clone().into(), child.clone()],
            Relation::ApiSequence { apis } => apis.iter().cloned().map(Descriptor::Api).collect(),
            Relation::ApiArg { api, .. } | Relation::ApiOutput { api, .. } => vec![api.clone().into()],
        }
    }

    pub fn params(&self) -> Params {
        match self {
            Relation::Consistent { .. } | Relation::EventContain { .. } | Relation::ApiSequence { .. } => {
                Params::default()
            }
            Relation::ApiArg { arg, is_distinct, .. } => Params {
                arg: Some(*arg),
                is_distinct: Some(*is_distinct),
                ..Params::default()
            },
            Relation::ApiOutput { bound, .. } => match bound {
                OutputBound::EqualsInputAttr { attr, arg } => Params {
                    arg: Some(*arg),
                    bound_type: Some(BoundType::EqualsInputAttr),
                    attr: Some(attr.clone()),
                    ..Params::default()
                },
                OutputBound::ConstantAttr { attr, value } => Params {
                    bound_type: Some(BoundType::ConstantAttr),
                    attr: Some(attr.clone()),
                    value: Some(value.clone()),
                    ..Params::default()
                },
            },
        }
    }

    /// Inverse of ([`Relation::kind`], [`Relation::params`], [`Relation::descriptors`]).
    pub fn from_parts(kind: RelationKind, params: &Params, descriptors: &[Descriptor]) -> Result<Self> {
        let bad = |reason: &str| Error::ArityMismatch {
            relation: kind.name().to_string(),
            reason: reason.to_string(),
        };
        let api = |d: &Descriptor| match d {
            Descriptor::Api(a) => Ok(a.clone()),
            Descriptor::Var(_) => Err(bad("expected an API descriptor")),
        };
        let var = |d: &Descriptor| match d {
            Descriptor::Var(v) => Ok(v.clone()),
            Descriptor::Api(_) => Err(bad("expected a variable descriptor")),
        };
        Ok(match (kind, descriptors) {
            (RelationKind::Consistent, [a, b]) => Relation::consistent(var(a)?, var(b)?),
            (RelationKind::EventContain, [p, c]) => Relation::EventContain {
                parent: api(p)?,
                child: c.clone(),
            },
            (RelationKind::ApiSequence, ds) if ds.len() >= 2 => Relation::ApiSequence {
                apis: ds.iter().map(api).collect::<Result<_>>()?,
            },
            (RelationKind::ApiArg, [d]) => Relation::ApiArg {
                api: api(d)?,
                arg: params.arg.ok_or_else(|| bad("missing `arg`"))?,
                is_distinct: params.is_distinct.ok_or_else(|| bad("missing `is_distinct`"))?,
            },
            (RelationKind::ApiOutput, [d]) => {
                let attr = params.attr.clone().ok_or_else(|| bad("missing `attr`"))?;
                let bound = match params.bound_type {
                    Some(BoundType::EqualsInputAttr) => OutputBound::EqualsInputAttr {
                        attr,
                        arg: params.arg.ok_or_else(|| bad("missing `arg`"))?,
                    },
                    Some(BoundType::ConstantAttr) => OutputBound::ConstantAttr {
                        attr,
                        value: params.value.clone().ok_or_else(|| bad("missing `value`"))?,
                    },
                    None => return Err(bad("missing `bound_type`")),
                };
                Relation::ApiOutput { api: api(d)?, bound }
            }
            _ => return Err(bad(&format!("{} descriptors", descriptors.len()))),
        })
    }

    /// Stable human-readable identifier, unique per relation instance.
    pub fn id(&self) -> String {
        match self {
            Relation::Consistent { left, right } => format!("Consistent({left}, {right})"),
            Relation::EventContain { parent, child } => format!("EventContain({parent}, {child})"),
            Relation::ApiSequence { apis } => {
                let names: Vec<String> = apis.iter().map(ToString::to_string).collect();
                format!("APISequence({})", names.join(", "))
            }
            Relation::ApiArg { api, arg, is_distinct } => {
                let mode = if *is_distinct { "distinct" } else { "identical" };
                format!("APIArg({api}, args.{arg}, {mode})")
            }
            Relation::ApiOutput { api, bound } => match bound {
                OutputBound::EqualsInputAttr { attr, arg } => {
                    format!("APIOutput({api}, ret.{attr} == args.{arg}.{attr})")
                }
                OutputBound::ConstantAttr { attr, value } => format!("APIOutput({api}, ret.{attr} == {value})"),
            },
        }
    }

    /// API names whose calls this relation examines.
    pub fn api_names(&self) -> Vec<&str> {
        match self {
            Relation::Consistent { .. } => vec![],
            Relation::EventContain { parent, child } => {
                let mut v = vec![parent.func.as_str()];
                if let Descriptor::Api(c) = child {
                    v.push(c.func.as_str());
                }
                v
            }
            Relation::ApiSequence { apis } => apis.iter().map(|a| a.func.as_str()).collect(),
            Relation::ApiArg { api, .. } | Relation::ApiOutput { api, .. } => vec![api.func.as_str()],
        }
    }

    /// Decides an example according to the relation's semantics.
    pub fn evaluate(&self, subject: &Subject) -> Result<Verdict> {
        let mismatch = |reason: String| Error::ArityMismatch {
            relation: self.kind().name().to_string(),
            reason,
        };
        let holds = match (self, subject) {
            (Relation::Consistent { .. }, Subject::Pair { left, right }) => left == right,
            (
                Relation::EventContain { .. },
                Subject::Span {
                    entry_ts,
                    exit_ts,
                    matched,
                    ..
                },
            ) => match exit_ts {
                Some(end) => matched.iter().any(|t| entry_ts <= t && t <= end),
                None => false,
            },
            (Relation::ApiSequence { apis }, Subject::Window { firsts }) => {
                if firsts.len() != apis.len() {
                    return Err(mismatch(format!("window lists {} APIs, relation {}", firsts.len(), apis.len())));
                }
                let mut prev: Option<u64> = None;
                firsts.iter().all(|pos| match (*pos, prev) {
                    (Some(p), Some(q)) if p <= q => false,
                    (Some(p), _) => {
                        prev = Some(p);
                        true
                    }
                    (None, _) => false,
                })
            }
            (Relation::ApiArg { is_distinct, .. }, Subject::Calls { values }) => {
                if *is_distinct {
                    let mut seen = values.clone();
                    seen.sort();
                    seen.windows(2).all(|w| w[0] != w[1])
                } else {
                    values.windows(2).all(|w| w[0] == w[1])
                }
            }
            (Relation::ApiOutput { bound, .. }, Subject::Output { args, ret }) => {
                let Some(ret) = ret else {
                    return Ok(Verdict::Failing);
                };
                match bound {
                    OutputBound::EqualsInputAttr { attr, arg } => {
                        let out = ret.attribute(attr);
                        out.is_some() && out == args.get(*arg).and_then(|a| a.attribute(attr))
                    }
                    OutputBound::ConstantAttr { attr, value } => ret.attribute(attr).as_ref() == Some(value),
                }
            }
            (rel, subj) => {
                return Err(mismatch(format!("{} cannot judge a `{}` example", rel.kind(), subj.name())));
            }
        };
        Ok(if holds { Verdict::Passing } else { Verdict::Failing })
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Passing,
    Failing,
}

/// Field view of one trace entity, as seen by precondition deduction.
///
/// Variable observations expose the variable's attributes by name; API
/// entries expose `args.<i>` (plus `.shape`/`.dtype` for tensors). Both
/// expose meta variables as `meta_vars.<key>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub pid: u64,
    pub tid: u64,
    pub ts: u64,
    /// API name, or `<var_type>:<var_id>` for variables.
    pub source: String,
    pub fields: BTreeMap<String, Value>,
}

impl ExampleRecord {
    pub fn get(&self, field: &str) -> Option<&Value> {
        self.fields.get(field)
    }
}

/// What the relation looks at when judging an example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "s", rename_all = "snake_case")]
pub enum Subject {
    Pair {
        left: Value,
        right: Value,
    },
    Span {
        func: String,
        entry_ts: u64,
        exit_ts: Option<u64>,
        /// Timestamps of nested events matching the child descriptor.
        matched: Vec<u64>,
    },
    Window {
        /// Stream position of each listed API's first occurrence.
        firsts: Vec<Option<u64>>,
    },
    Calls {
        values: Vec<Option<Value>>,
    },
    Output {
        args: Vec<Value>,
        ret: Option<Value>,
    },
}

impl Subject {
    fn name(&self) -> &'static str {
        match self {
            Subject::Pair { .. } => "pair",
            Subject::Span { .. } => "span",
            Subject::Window { .. } => "window",
            Subject::Calls { .. } => "calls",
            Subject::Output { .. } => "output",
        }
    }
}

/// A group of records examined together, with the verdict it received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub step: StepKey,
    /// Checking unit inside the step (alignment key, thread, ...).
    pub unit: String,
    pub records: Vec<Arc<ExampleRecord>>,
    pub subject: Subject,
    pub verdict: Verdict,
}

impl Example {
    pub fn new(
        relation: &Relation,
        step: StepKey,
        unit: String,
        records: Vec<Arc<ExampleRecord>>,
        subject: Subject,
    ) -> Result<Self> {
        let verdict = relation.evaluate(&subject)?;
        Ok(Example {
            step,
            unit,
            records,
            subject,
            verdict,
        })
    }

    pub fn is_passing(&self) -> bool {
        self.verdict == Verdict::Passing
    }
}

/// Anything that exposes the field records of an example.
pub trait HasRecords {
    fn records(&self) -> &[Arc<ExampleRecord>];
}

impl HasRecords for Example {
    fn records(&self) -> &[Arc<ExampleRecord>] {
        &self.records
    }
}

impl HasRecords for Vec<Arc<ExampleRecord>> {
    fn records(&self) -> &[Arc<ExampleRecord>] {
        self
    }
}

impl<T: HasRecords + ?Sized> HasRecords for &T {
    fn records(&self) -> &[Arc<ExampleRecord>] {
        (**self).records()
    }
}
