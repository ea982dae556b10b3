//! Trace records, the newline-delimited wire format, and event reconstruction.

mod events;
mod record;
mod run;

pub use events::{for_each_call, reconstruct_events, ApiCallEvent, Event, VarChangeEvent};
pub use record::{
    parse_trace, serialize_trace, write_record, write_trace, RecordBody, RecordKind, StepKey,
    TraceReader, TraceRecord, SCHEMA_VERSION, STEP_KEY,
};
pub use run::{merge_streams, Run, TRACE_EXT};
