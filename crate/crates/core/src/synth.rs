//! Synthetic distributed training runs with injectable silent errors.
//!
//! Every process runs the same per-step script over the same parameter list.
//! Replicated parameters (`tensor_model_parallel = false`) hold one value on
//! every rank; partitioned ones hold one value per TP rank. Values are
//! digests derived from `(seed, kind, param, group, step, fault)`, so equal
//! digests mean equal content by construction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::relation::RelationKind;
use crate::trace::{RecordBody, Run, TraceRecord, STEP_KEY};
use crate::value::{hex_prefix, Scalar, Value, DIGEST_BYTES};
use crate::verify::Manifest;

pub const PARAM_TYPE: &str = "torch.nn.Parameter";
pub const WORKER_INIT: &str = "data.worker_init_fn";
pub const PROCESSOR: &str = "data.Processor.__call__";
pub const ZERO_GRAD: &str = "torch.optim.Optimizer.zero_grad";
pub const FORWARD: &str = "model.forward";
pub const BACKWARD: &str = "torch.Tensor.backward";
pub const OPT_STEP: &str = "torch.optim.Optimizer.step";
pub const ADAMW: &str = "torch.optim.adamw.adamw";
pub const MANIFEST_FILE: &str = "manifest.json";

const BATCH_SHAPE: [u64; 4] = [8, 3, 32, 32];
const DTYPE: &str = "float32";
const LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    TpDivergence,
    MissingZeroGrad,
    FrozenOptimizer,
    DuplicateSeed,
    OutputTruncation,
    DdpDesync,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::TpDivergence,
        FaultKind::MissingZeroGrad,
        FaultKind::FrozenOptimizer,
        FaultKind::DuplicateSeed,
        FaultKind::OutputTruncation,
        FaultKind::DdpDesync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::TpDivergence => "TP_DIVERGENCE",
            FaultKind::MissingZeroGrad => "MISSING_ZERO_GRAD",
            FaultKind::FrozenOptimizer => "FROZEN_OPTIMIZER",
            FaultKind::DuplicateSeed => "DUPLICATE_SEED",
            FaultKind::OutputTruncation => "OUTPUT_TRUNCATION",
            FaultKind::DdpDesync => "DDP_DESYNC",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown fault kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub inject_step: i64,
}

impl FromStr for FaultSpec {
    type Err = Error;

    /// `KIND@STEP`, e.g. `TP_DIVERGENCE@2`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, step) = s
            .split_once('@')
            .ok_or_else(|| Error::InvalidConfig(format!("fault `{s}` is not KIND@STEP")))?;
        let inject_step = step
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad inject step in `{s}`")))?;
        Ok(FaultSpec {
            kind: kind.parse()?,
            inject_step,
        })
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind, self.inject_step)
    }
}

/// One entry of the per-step script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptCall {
    WorkerInit,
    Process,
    ZeroGrad,
    Forward,
    Backward,
    Step,
}

impl ScriptCall {
    pub fn default_script() -> Vec<ScriptCall> {
        vec![
            ScriptCall::WorkerInit,
            ScriptCall::Process,
            ScriptCall::ZeroGrad,
            ScriptCall::Forward,
            ScriptCall::Backward,
            ScriptCall::Step,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dp: u32,
    pub tp: u32,
    pub n_params: u32,
    pub replicated_fraction: f64,
    /// Training steps; step 0 is initialization and steps `1..=n_steps` train.
    pub n_steps: u32,
    pub seed: u64,
    pub fault: Option<FaultSpec>,
    pub script: Vec<ScriptCall>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dp: 2,
            tp: 2,
            n_params: 8,
            replicated_fraction: 0.25,
            n_steps: 6,
            seed: 0,
            fault: None,
            script: ScriptCall::default_script(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dp == 0 || self.tp == 0 {
            return bad("dp and tp must be at least 1".into());
        }
        if self.n_params == 0 || self.n_steps == 0 {
            return bad("params and steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.replicated_fraction) {
            return bad(format!("replicated fraction {} not in [0, 1]", self.replicated_fraction));
        }
        if let Some(f) = self.fault {
            if f.inject_step < 1 || f.inject_step > i64::from(self.n_steps) {
                return bad(format!("inject step {} outside 1..={}", f.inject_step, self.n_steps));
            }
        }
        Ok(())
    }

    pub fn processes(&self) -> u32 {
        self.dp * self.tp
    }

    pub fn replicated_count(&self) -> u32 {
        (f64::from(self.n_params) * self.replicated_fraction).round() as u32
    }

    /// Parameter names with their `tensor_model_parallel` flag.
    pub fn params(&self) -> Vec<(String, bool)> {
        let r = self.replicated_count();
        let mut out: Vec<(String, bool)> = (0..r)
            .map(|i| (format!("layers.{i}.input_layernorm.weight"), false))
            .collect();
        out.extend((0..self.n_params - r).map(|i| (format!("layers.{i}.attention.dense.weight"), true)));
        out
    }

    fn active(&self, kind: FaultKind, step: i64) -> bool {
        self.fault.is_some_and(|f| f.kind == kind && step >= f.inject_step)
    }
}

/// What each fault changes and which relation is expected to notice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInfo {
    pub kind: FaultKind,
    pub summary: String,
    pub affected: Vec<String>,
    pub catchers: Vec<RelationKind>,
}

pub fn describe_faults() -> Vec<FaultInfo> {
    let info = |kind, summary: &str, affected: &[&str], catchers: &[RelationKind]| FaultInfo {
        kind,
        summary: summary.to_string(),
        affected: affected.iter().map(|s| s.to_string()).collect(),
        catchers: catchers.to_vec(),
    };
    use RelationKind::*;
    vec![
        info(
            FaultKind::TpDivergence,
            "replicated parameters drift apart on TP ranks other than 0",
            &["torch.nn.Parameter.data", "torch.nn.Parameter.grad"],
            &[Consistent],
        ),
        info(
            FaultKind::MissingZeroGrad,
            "zero_grad is never called, so gradients accumulate across steps",
            &[ZERO_GRAD, "torch.nn.Parameter.grad"],
            &[EventContain, ApiSequence],
        ),
        info(
            FaultKind::FrozenOptimizer,
            "optimizer step no longer calls the update kernel and parameters stop changing",
            &[ADAMW, "torch.nn.Parameter.data"],
            &[EventContain, ApiSequence],
        ),
        info(
            FaultKind::DuplicateSeed,
            "every rank initializes its data loader worker with the same seed",
            &["data.worker_init_fn.args.0"],
            &[ApiArg],
        ),
        info(
            FaultKind::OutputTruncation,
            "the data processor returns a batch of size 1",
            &["data.Processor.__call__.ret.shape", "model.forward.args.0.shape"],
            &[ApiOutput],
        ),
        info(
            FaultKind::DdpDesync,
            "parameters on data-parallel ranks other than 0 drift from rank 0",
            &["torch.nn.Parameter.data", "torch.nn.Parameter.grad"],
            &[Consistent],
        ),
    ]
}

fn digest(cfg: &RunConfig, parts: &[&str], shape: &[u64]) -> Value {
    let mut h = Sha256::new();
    h.update(cfg.seed.to_le_bytes());
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    Value::digest(hex_prefix(&h.finalize(), DIGEST_BYTES), shape.to_vec(), DTYPE)
}

struct Emitter<'a> {
    sel: Option<&'a Manifest>,
    pid: u64,
    meta: BTreeMap<String, Scalar>,
    step: i64,
    counter: u64,
    out: Vec<TraceRecord>,
}

impl Emitter<'_> {
    fn push(&mut self, body: RecordBody) {
        let ts = self.step as u64 * 1_000_000_000_000 + self.counter * 1000 + self.pid;
        self.counter += 1;
        let meta = match self.sel {
            Some(m) => self
                .meta
                .iter()
                .filter(|(k, _)| m.meta_keys.contains(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            None => self.meta.clone(),
        };
        self.out.push(TraceRecord {
            ts,
            pid: self.pid,
            tid: 0,
            meta,
            body,
        });
    }

    fn wants_api(&self, func: &str) -> bool {
        self.sel.is_none_or(|m| m.apis.contains(func))
    }

    fn wants_var(&self, attr: &str) -> bool {
        self.sel.is_none_or(|m| m.wants_var(PARAM_TYPE, attr))
    }

    fn enter(&mut self, func: &str, args: Vec<Value>) {
        if self.wants_api(func) {
            self.push(RecordBody::Entry {
                func: func.to_string(),
                args,
            });
        }
    }

    fn exit(&mut self, func: &str, ret: Value) {
        if self.wants_api(func) {
            self.push(RecordBody::Exit {
                func: func.to_string(),
                ret,
                exception: None,
            });
        }
    }

    fn var(&mut self, name: &str, attr: &str, value: Value) {
        if self.wants_var(attr) {
            self.push(RecordBody::VarState {
                var_type: PARAM_TYPE.to_string(),
                var_id: format!("rank{}::{name}", self.pid),
                attr: attr.to_string(),
                value,
            });
        }
    }
}

fn process_records(cfg: &RunConfig, dp_rank: u32, tp_rank: u32, sel: Option<&Manifest>) -> Vec<TraceRecord> {
    let pid = u64::from(dp_rank * cfg.tp + tp_rank);
    let params = cfg.params();
    let mut em = Emitter {
        sel,
        pid,
        meta: BTreeMap::new(),
        step: 0,
        counter: 0,
        out: Vec::new(),
    };
    let set_meta = |em: &mut Emitter<'_>, step: i64| {
        em.step = step;
        em.counter = 0;
        em.meta = BTreeMap::from([
            (STEP_KEY.to_string(), Scalar::Int(step)),
            ("epoch".to_string(), Scalar::Int(step / 10)),
            ("stage".to_string(), Scalar::from(if step == 0 { "init" } else { "train" })),
            ("TP_RANK".to_string(), Scalar::Int(i64::from(tp_rank))),
            ("DP_RANK".to_string(), Scalar::Int(i64::from(dp_rank))),
        ]);
    };
    let tp_group = format!("tp{tp_rank}");
    let param_shape = [64u64, 64];

    // Group and fault tag of a parameter's data/grad at a step.
    let state = |step: i64, replicated: bool| -> (&str, &str) {
        let group = if replicated { "all" } else { tp_group.as_str() };
        let tp_drift = replicated && tp_rank > 0 && cfg.active(FaultKind::TpDivergence, step);
        let dp_drift = dp_rank > 0 && cfg.active(FaultKind::DdpDesync, step);
        let tag = match (tp_drift, dp_drift) {
            (true, _) => "tp-drift",
            (_, true) => "dp-drift",
            _ => "",
        };
        (group, tag)
    };
    let data_at = |step: i64, name: &str, replicated: bool| -> Value {
        let (group, tag) = state(step, replicated);
        digest(cfg, &["data", name, group, &step.to_string(), tag], &param_shape)
    };
    let grad_at = |step: i64, name: &str, replicated: bool| -> Value {
        let (group, tag) = state(step, replicated);
        let kind = if cfg.active(FaultKind::MissingZeroGrad, step) { "grad-acc" } else { "grad" };
        digest(cfg, &[kind, name, group, &step.to_string(), tag], &param_shape)
    };

    set_meta(&mut em, 0);
    for (name, tmp) in &params {
        em.var(name, "tensor_model_parallel", Value::Bool(*tmp));
        em.var(name, "is_cuda", Value::Bool(true));
        em.var(name, "data", data_at(0, name, !tmp));
    }

    let dp_group = format!("dp{dp_rank}");
    for step in 1..=i64::from(cfg.n_steps) {
        set_meta(&mut em, step);
        let s = step.to_string();
        let batch = digest(cfg, &["batch", &dp_group, &s], &BATCH_SHAPE);
        let mut processed = digest(cfg, &["processed", &dp_group, &s], &BATCH_SHAPE);
        for call in &cfg.script {
            match call {
                ScriptCall::WorkerInit => {
                    let worker_seed = if cfg.active(FaultKind::DuplicateSeed, step) {
                        cfg.seed as i64
                    } else {
                        cfg.seed as i64 + i64::from(dp_rank * cfg.tp + tp_rank) + 1
                    };
                    em.enter(WORKER_INIT, vec![Value::Int(worker_seed), Value::Int(0)]);
                    em.exit(WORKER_INIT, Value::None);
                }
                ScriptCall::Process => {
                    if cfg.active(FaultKind::OutputTruncation, step) {
                        processed = digest(cfg, &["truncated", &dp_group, &s], &[1, 3, 32, 32]);
                    }
                    em.enter(PROCESSOR, vec![batch.clone()]);
                    em.exit(PROCESSOR, processed.clone());
                }
                ScriptCall::ZeroGrad => {
                    if cfg.active(FaultKind::MissingZeroGrad, step) {
                        continue;
                    }
                    em.enter(ZERO_GRAD, vec![Value::Bool(true)]);
                    for (name, _) in &params {
                        em.var(name, "grad", Value::None);
                    }
                    em.exit(ZERO_GRAD, Value::None);
                }
                ScriptCall::Forward => {
                    let loss = digest(cfg, &["loss", &dp_group, &s], &[]);
                    em.enter(FORWARD, vec![processed.clone()]);
                    em.exit(FORWARD, loss);
                }
                ScriptCall::Backward => {
                    let loss = digest(cfg, &["loss", &dp_group, &s], &[]);
                    em.enter(BACKWARD, vec![loss]);
                    for (name, tmp) in &params {
                        em.var(name, "grad", grad_at(step, name, !tmp));
                    }
                    em.exit(BACKWARD, Value::None);
                }
                ScriptCall::Step => {
                    em.enter(OPT_STEP, vec![]);
                    if !cfg.active(FaultKind::FrozenOptimizer, step) {
                        em.enter(ADAMW, vec![Value::Float(LR.into())]);
                        for (name, tmp) in &params {
                            em.var(name, "data", data_at(step, name, !tmp));
                        }
                        em.exit(ADAMW, Value::None);
                    }
                    em.exit(OPT_STEP, Value::None);
                }
            }
        }
    }
    em.out
}

/// Generates one run; with a selection manifest only the listed APIs,
/// variable attributes and meta keys are emitted.
pub fn generate_selected(cfg: &RunConfig, id: &str, selection: Option<&Manifest>) -> Result<Run> {
    cfg.validate()?;
    let mut records = Vec::new();
    for dp in 0..cfg.dp {
        for tp in 0..cfg.tp {
            records.extend(process_records(cfg, dp, tp, selection));
        }
    }
    Ok(Run::from_records(id, records))
}

pub fn generate(cfg: &RunConfig, id: &str) -> Result<Run> {
    generate_selected(cfg, id, None)
}

/// Writes the run's trace files plus a manifest echoing the configuration.
pub fn write_run(cfg: &RunConfig, run: &Run, dir: &Path) -> Result<()> {
    run.write_dir(dir)?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}
