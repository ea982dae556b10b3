//! Descriptors: abstract selectors over API calls and variable states.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::{RecordBody, TraceRecord, VarChangeEvent};
use crate::value::{Value, ValueKind};

/// Constraint on a single value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValuePattern {
    Equals(Value),
    Kind(ValueKind),
}

impl ValuePattern {
    pub fn matches(&self, v: &Value) -> bool {
        match self {
            ValuePattern::Equals(expected) => expected == v,
            ValuePattern::Kind(kind) => v.kind() == *kind,
        }
    }
}

impl fmt::Display for ValuePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValuePattern::Equals(v) => write!(f, "{v}"),
            ValuePattern::Kind(k) => write!(f, "<{}>", serde_json::to_string(k).unwrap_or_default().trim_matches('"')),
        }
    }
}

/// Expected change of a variable attribute. `old` only matches when a
/// previous value exists.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChangePattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old: Option<ValuePattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new: Option<ValuePattern>,
}

impl ChangePattern {
    pub fn is_empty(&self) -> bool {
        self.old.is_none() && self.new.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ApiDescriptor {
    pub func: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<usize, ValuePattern>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ret: Option<ValuePattern>,
}

impl ApiDescriptor {
    pub fn new(func: impl Into<String>) -> Self {
        ApiDescriptor {
            func: func.into(),
            args: BTreeMap::new(),
            ret: None,
        }
    }

    pub fn matches_args(&self, func: &str, args: &[Value]) -> bool {
        func == self.func
            && self
                .args
                .iter()
                .all(|(i, p)| args.get(*i).is_some_and(|v| p.matches(v)))
    }

    fn matches_ret(&self, ret: Option<&Value>) -> bool {
        match (&self.ret, ret) {
            (None, _) => true,
            (Some(p), Some(v)) => p.matches(v),
            (Some(_), None) => false,
        }
    }

    /// Matches a call given its arguments and (for completed calls) return value.
    pub fn matches_call(&self, func: &str, args: &[Value], ret: Option<&Value>) -> bool {
        self.matches_args(func, args) && self.matches_ret(ret)
    }

    /// Entry records are checked against the argument constraints, exit
    /// records against the return constraint.
    pub fn matches_record(&self, r: &TraceRecord) -> bool {
        match &r.body {
            RecordBody::Entry { func, args } => self.matches_args(func, args),
            RecordBody::Exit { func, ret, .. } => *func == self.func && self.matches_ret(Some(ret)),
            RecordBody::VarState { .. } => false,
        }
    }
}

impl fmt::Display for ApiDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.func)?;
        if !self.args.is_empty() || self.ret.is_some() {
            let mut parts: Vec<String> = self.args.iter().map(|(i, p)| format!("args.{i}={p}")).collect();
            if let Some(r) = &self.ret {
                parts.push(format!("ret={r}"));
            }
            write!(f, "[{}]", parts.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarDescriptor {
    pub var_type: String,
    pub attr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<ChangePattern>,
}

impl VarDescriptor {
    pub fn new(var_type: impl Into<String>, attr: impl Into<String>) -> Self {
        VarDescriptor {
            var_type: var_type.into(),
            attr: attr.into(),
            change: None,
        }
    }

    pub fn with_change(mut self, old: Option<ValuePattern>, new: Option<ValuePattern>) -> Self {
        let c = ChangePattern { old, new };
        self.change = (!c.is_empty()).then_some(c);
        self
    }

    pub fn matches_var(&self, var_type: &str, attr: &str) -> bool {
        var_type == self.var_type && attr == self.attr
    }

    /// A raw state record carries no previous value, so only the `new` half
    /// of a change pattern can be checked here.
    pub fn matches_record(&self, r: &TraceRecord) -> bool {
        match &r.body {
            RecordBody::VarState {
                var_type,
                attr,
                value,
                ..
            } => {
                self.matches_var(var_type, attr)
                    && self
                        .change
                        .as_ref()
                        .and_then(|c| c.new.as_ref())
                        .is_none_or(|p| p.matches(value))
            }
            _ => false,
        }
    }

    pub fn matches_change(&self, e: &VarChangeEvent) -> bool {
        if !self.matches_var(&e.var_type, &e.attr) {
            return false;
        }
        let Some(c) = &self.change else { return true };
        let new_ok = c.new.as_ref().is_none_or(|p| p.matches(&e.new_value));
        let old_ok = match (&c.old, &e.old_value) {
            (None, _) => true,
            (Some(p), Some(v)) => p.matches(v),
            (Some(_), None) => false,
        };
        new_ok && old_ok
    }
}

impl fmt::Display for VarDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.var_type, self.attr)?;
        if let Some(c) = &self.change {
            let mut parts = Vec::new();
            if let Some(o) = &c.old {
                parts.push(format!("old={o}"));
            }
            if let Some(n) = &c.new {
                parts.push(format!("new={n}"));
            }
            write!(f, "[{}]", parts.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "d", rename_all = "snake_case")]
pub enum Descriptor {
    Api(ApiDescriptor),
    Var(VarDescriptor),
}

impl Descriptor {
    pub fn matches_record(&self, r: &TraceRecord) -> bool {
        match self {
            Descriptor::Api(d) => d.matches_record(r),
            Descriptor::Var(d) => d.matches_record(r),
        }
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Descriptor::Api(d) => d.fmt(f),
            Descriptor::Var(d) => d.fmt(f),
        }
    }
}

impl From<ApiDescriptor> for Descriptor {
    fn from(d: ApiDescriptor) -> Self {
        Descriptor::Api(d)
    }
}

impl From<VarDescriptor> for Descriptor {
    fn from(d: VarDescriptor) -> Self {
        Descriptor::Var(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Scalar;

    fn state(attr: &str, value: Value) -> TraceRecord {
        TraceRecord {
            ts: 0,
            pid: 0,
            tid: 0,
            meta: BTreeMap::new(),
            body: RecordBody::VarState {
                var_type: "torch.nn.Parameter".into(),
                var_id: "w".into(),
                attr: attr.into(),
                value,
            },
        }
    }

    #[test]
    fn var_descriptor_matches_type_and_attr() {
        let d = VarDescriptor::new("torch.nn.Parameter", "data");
        assert!(d.matches_record(&state("data", Value::Int(1))));
        assert!(!d.matches_record(&state("grad", Value::Int(1))));
    }

    #[test]
    fn api_descriptor_matches_entry_by_name() {
        let d = ApiDescriptor::new("torch.optim.Optimizer.zero_grad");
        let entry = TraceRecord {
            ts: 0,
            pid: 0,
            tid: 0,
            meta: BTreeMap::from([("step".into(), Scalar::Int(1))]),
            body: RecordBody::Entry {
                func: "torch.optim.Optimizer.zero_grad".into(),
                args: vec![],
            },
        };
        assert!(d.matches_record(&entry));
        assert!(!ApiDescriptor::new("torch.optim.Optimizer.step").matches_record(&entry));
    }

    #[test]
    fn change_pattern_needs_previous_value_for_old() {
        let d = VarDescriptor::new("T", "grad").with_change(Some(ValuePattern::Equals(Value::None)), None);
        let mut e = VarChangeEvent {
            pid: 0,
            tid: 0,
            var_type: "T".into(),
            var_id: "w".into(),
            attr: "grad".into(),
            old_value: None,
            new_value: Value::Int(3),
            timestamp: 0,
            meta: BTreeMap::new(),
        };
        assert!(!d.matches_change(&e));
        e.old_value = Some(Value::None);
        assert!(d.matches_change(&e));
        e.old_value = Some(Value::Int(2));
        assert!(!d.matches_change(&e));
    }

    #[test]
    fn arg_constraints() {
        let mut d = ApiDescriptor::new("f");
        d.args.insert(1, ValuePattern::Kind(ValueKind::Int));
        assert!(d.matches_args("f", &[Value::None, Value::Int(4)]));
        assert!(!d.matches_args("f", &[Value::None]));
        assert_eq!(d.to_string(), "f[args.1=<int>]");
    }
}
