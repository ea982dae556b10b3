use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::Result;
use crate::relation::templates::{ApiArgTemplate, ApiOutputTemplate, ApiSequenceTemplate, ConsistentTemplate, EventContainTemplate};
use crate::relation::{Example, Relation, RelationKind};
use crate::units::RunIndex;

/// Knobs for hypothesis generation.
#[derive(Debug, Clone)]
pub struct GenOptions {
    /// APIs whose last path segment is listed here are never used in hypotheses.
    pub api_blocklist: BTreeSet<String>,
    /// Per relation and run, at most this many hypotheses (smallest first).
    pub max_hypotheses: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            api_blocklist: [
                "is_available",
                "is_scripting",
                "is_tracing",
                "is_initialized",
                "get_rank",
                "get_world_size",
                "device_count",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            max_hypotheses: 50_000,
        }
    }
}

impl GenOptions {
    pub fn is_blocked(&self, func: &str) -> bool {
        let last = func.rsplit('.').next().unwrap_or(func);
        self.api_blocklist.contains(last)
    }
}

/// A relation family: how to propose instances from a run and how to cut a
/// run into examples for a given instance.
pub trait RelationTemplate: Send + Sync {
    fn kind(&self) -> RelationKind;

    fn hypotheses(&self, run: &RunIndex, opts: &GenOptions) -> BTreeSet<Relation>;

    /// Emits every example of `rel` found in `run`, in a deterministic order.
    fn examples(&self, rel: &Relation, run: &RunIndex, sink: &mut dyn FnMut(Example)) -> Result<()>;
}

/// Relation templates keyed by name.
#[derive(Clone)]
pub struct Registry {
    templates: BTreeMap<&'static str, Arc<dyn RelationTemplate>>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry {
            templates: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ConsistentTemplate));
        r.register(Arc::new(EventContainTemplate));
        r.register(Arc::new(ApiSequenceTemplate));
        r.register(Arc::new(ApiArgTemplate));
        r.register(Arc::new(ApiOutputTemplate));
        r
    }

    /// Adds or replaces the template for its relation name.
    pub fn register(&mut self, t: Arc<dyn RelationTemplate>) {
        self.templates.insert(t.kind().name(), t);
    }

    pub fn get(&self, kind: RelationKind) -> Option<&Arc<dyn RelationTemplate>> {
        self.templates.get(kind.name())
    }

    pub fn by_name(&self, name: &str) -> Option<&Arc<dyn RelationTemplate>> {
        RelationKind::from_name(name).and_then(|k| self.get(k))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.templates.keys().copied()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}
