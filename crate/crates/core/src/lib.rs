pub mod descriptor;
pub mod error;
pub mod infer;
pub mod invariant;
pub mod precondition;
pub mod relation;
pub mod synth;
pub mod trace;
pub mod units;
pub mod value;
pub mod verify;

pub use error::{Error, Result};
pub use value::{Scalar, Value, ValueKind};

pub use descriptor::{ApiDescriptor, Descriptor, VarDescriptor};
pub use error::{Warning, WarningKind};
pub use infer::{infer, infer_indexed, InferConfig, Inference};
pub use invariant::{Invariant, InvariantFile};
pub use precondition::{Clause, CondType, Condition, Precondition};
pub use relation::{Example, Registry, Relation, RelationKind, Verdict};
pub use trace::{Run, TraceRecord};
pub use verify::{check_run, check_stream, Manifest, Mode, Violation};
