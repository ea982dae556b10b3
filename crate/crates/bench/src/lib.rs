//! Shared workload helpers for the benchmarks.

use trainvar_core::infer::{infer, InferConfig};
use trainvar_core::synth::{generate, RunConfig};
use trainvar_core::trace::serialize_trace;
use trainvar_core::{Invariant, Registry, Run};

/// A clean run of `n_params` parameters over `n_steps` steps on 2x2 ranks.
pub fn workload(n_params: u32, n_steps: u32, seed: u64) -> Run {
    let cfg = RunConfig {
        n_params,
        n_steps,
        seed,
        ..RunConfig::default()
    };
    generate(&cfg, &format!("bench{seed}")).expect("valid config")
}

/// Rank 0's trace as it would sit on disk.
pub fn wire_text(run: &Run) -> String {
    serialize_trace(run.processes.values().next().map(Vec::as_slice).unwrap_or_default())
}

pub fn trained(runs: &[Run]) -> Vec<Invariant> {
    infer(runs, &Registry::builtin(), &InferConfig::default())
        .expect("inference succeeds")
        .invariants
}
