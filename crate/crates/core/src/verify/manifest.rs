use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::descriptor::Descriptor;
use crate::error::Result;
use crate::invariant::Invariant;
use crate::trace::STEP_KEY;
use crate::units::META_PREFIX;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarSelector {
    pub var_type: String,
    pub attr: String,
}

/// What a trace must contain for a set of invariants to be checkable.
///
/// `fields` lists the non-meta fields their preconditions read, such as a
/// variable attribute other than the one being compared.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub apis: BTreeSet<String>,
    pub variables: BTreeSet<VarSelector>,
    pub meta_keys: BTreeSet<String>,
    pub fields: BTreeSet<String>,
}

impl Manifest {
    pub fn is_empty(&self) -> bool {
        self.apis.is_empty() && self.variables.is_empty() && self.meta_keys.is_empty() && self.fields.is_empty()
    }

    pub fn union(&mut self, other: &Manifest) {
        self.apis.extend(other.apis.iter().cloned());
        self.variables.extend(other.variables.iter().cloned());
        self.meta_keys.extend(other.meta_keys.iter().cloned());
        self.fields.extend(other.fields.iter().cloned());
    }

    pub fn wants_var(&self, var_type: &str, attr: &str) -> bool {
        self.fields.contains(attr) || self.variables.iter().any(|v| v.var_type == var_type && v.attr == attr)
    }

    fn add(&mut self, d: &Descriptor) {
        match d {
            Descriptor::Api(a) => {
                self.apis.insert(a.func.clone());
            }
            Descriptor::Var(v) => {
                self.variables.insert(VarSelector {
                    var_type: v.var_type.clone(),
                    attr: v.attr.clone(),
                });
            }
        }
    }

    fn of(inv: &Invariant) -> Result<Manifest> {
        inv.to_relation()?;
        let mut m = Manifest::default();
        for d in &inv.descriptors {
            m.add(d);
        }
        m.meta_keys.insert(STEP_KEY.to_string());
        for f in inv.precondition.fields() {
            match f.strip_prefix(META_PREFIX) {
                Some(key) => m.meta_keys.insert(key.to_string()),
                None => m.fields.insert(f.to_string()),
            };
        }
        Ok(m)
    }
}

/// Union of what each invariant needs; empty for no invariants.
pub fn required_descriptors(invs: &[Invariant]) -> Result<Manifest> {
    let mut m = Manifest::default();
    for inv in invs {
        m.union(&Manifest::of(inv)?);
    }
    Ok(m)
}
