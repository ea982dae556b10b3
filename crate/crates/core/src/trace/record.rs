use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Scalar, Value};

/// Trace schema version written in every file header.
pub const SCHEMA_VERSION: u64 = 1;

/// Meta key carrying the training-iteration index.
pub const STEP_KEY: &str = "step";

/// Iteration window of a record; `None` when the record carries no integer `step`.
pub type StepKey = Option<i64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    FuncEntry,
    FuncExit,
    VarState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordBody {
    Entry {
        func: String,
        args: Vec<Value>,
    },
    Exit {
        func: String,
        ret: Value,
        exception: Option<String>,
    },
    VarState {
        var_type: String,
        var_id: String,
        attr: String,
        value: Value,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub ts: u64,
    pub pid: u64,
    pub tid: u64,
    pub meta: BTreeMap<String, Scalar>,
    pub body: RecordBody,
}

impl TraceRecord {
    pub fn kind(&self) -> RecordKind {
        match self.body {
            RecordBody::Entry { .. } => RecordKind::FuncEntry,
            RecordBody::Exit { .. } => RecordKind::FuncExit,
            RecordBody::VarState { .. } => RecordKind::VarState,
        }
    }

    pub fn func(&self) -> Option<&str> {
        match &self.body {
            RecordBody::Entry { func, .. } | RecordBody::Exit { func, .. } => Some(func),
            RecordBody::VarState { .. } => None,
        }
    }

    pub fn step(&self) -> StepKey {
        self.meta.get(STEP_KEY).and_then(Scalar::as_int)
    }

    pub fn thread(&self) -> (u64, u64) {
        (self.pid, self.tid)
    }
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ts: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pid: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tid: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    func: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    args: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ret: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    var_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    var_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<BTreeMap<String, Scalar>>,
}

impl WireRecord {
    fn header() -> Self {
        WireRecord {
            kind: "header".into(),
            schema: Some(SCHEMA_VERSION),
            ts: None,
            pid: None,
            tid: None,
            func: None,
            args: None,
            ret: None,
            exc: None,
            var_type: None,
            var_id: None,
            attr: None,
            value: None,
            meta: None,
        }
    }

    fn into_record(self, line: usize) -> Result<TraceRecord> {
        let bad = |reason: &str| Error::MalformedRecord {
            line,
            reason: reason.to_string(),
        };
        let ts = self.ts.ok_or_else(|| bad("missing `ts`"))?;
        let pid = self.pid.ok_or_else(|| bad("missing `pid`"))?;
        let tid = self.tid.ok_or_else(|| bad("missing `tid`"))?;
        let body = match self.kind.as_str() {
            "func_entry" => RecordBody::Entry {
                func: self.func.ok_or_else(|| bad("entry record without `func`"))?,
                args: self.args.unwrap_or_default(),
            },
            "func_exit" => RecordBody::Exit {
                func: self.func.ok_or_else(|| bad("exit record without `func`"))?,
                ret: self.ret.unwrap_or(Value::None),
                exception: self.exc,
            },
            "var_state" => RecordBody::VarState {
                var_type: self.var_type.ok_or_else(|| bad("var record without `var_type`"))?,
                var_id: self.var_id.ok_or_else(|| bad("var record without `var_id`"))?,
                attr: self.attr.ok_or_else(|| bad("var record without `attr`"))?,
                value: self.value.ok_or_else(|| bad("var record without `value`"))?,
            },
            "header" => return Err(bad("header line is only allowed first")),
            other => return Err(bad(&format!("unknown record kind `{other}`"))),
        };
        Ok(TraceRecord {
            ts,
            pid,
            tid,
            meta: self.meta.unwrap_or_default(),
            body,
        })
    }
}

impl From<&TraceRecord> for WireRecord {
    fn from(r: &TraceRecord) -> Self {
        let mut w = WireRecord::header();
        w.schema = None;
        w.ts = Some(r.ts);
        w.pid = Some(r.pid);
        w.tid = Some(r.tid);
        w.meta = Some(r.meta.clone());
        match &r.body {
            RecordBody::Entry { func, args } => {
                w.kind = "func_entry".into();
                w.func = Some(func.clone());
                w.args = Some(args.clone());
            }
            RecordBody::Exit {
                func,
                ret,
                exception,
            } => {
                w.kind = "func_exit".into();
                w.func = Some(func.clone());
                w.ret = Some(ret.clone());
                w.exc = exception.clone();
            }
            RecordBody::VarState {
                var_type,
                var_id,
                attr,
                value,
            } => {
                w.kind = "var_state".into();
                w.var_type = Some(var_type.clone());
                w.var_id = Some(var_id.clone());
                w.attr = Some(attr.clone());
                w.value = Some(value.clone());
            }
        }
        w
    }
}

/// Streaming reader over a newline-delimited trace.
///
/// The first non-blank line must be the header; blank lines are skipped.
pub struct TraceReader<R> {
    input: R,
    line: usize,
    seen_header: bool,
    buf: String,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(input: R) -> Self {
        TraceReader {
            input,
            line: 0,
            seen_header: false,
            buf: String::new(),
        }
    }

    fn next_record(&mut self) -> Result<Option<TraceRecord>> {
        loop {
            self.buf.clear();
            if self.input.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            let text = self.buf.trim();
            if text.is_empty() {
                continue;
            }
            let wire: WireRecord = serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
                line: self.line,
                reason: e.to_string(),
            })?;
            if !self.seen_header {
                if wire.kind != "header" {
                    return Err(Error::MalformedRecord {
                        line: self.line,
                        reason: "missing header line".into(),
                    });
                }
                let found = wire.schema.unwrap_or(0);
                if found != SCHEMA_VERSION {
                    return Err(Error::SchemaVersionMismatch {
                        found,
                        expected: SCHEMA_VERSION,
                    });
                }
                self.seen_header = true;
                continue;
            }
            return wire.into_record(self.line).map(Some);
        }
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Parses a complete trace stream into records, in file order.
pub fn parse_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    TraceReader::new(input).collect()
}

/// Writes the header followed by one line per record.
pub fn write_trace<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    serde_json::to_writer(&mut out, &WireRecord::header())?;
    out.write_all(b"\n")?;
    for r in records {
        write_record(&mut out, r)?;
    }
    Ok(())
}

pub fn write_record<W: Write>(mut out: W, record: &TraceRecord) -> Result<()> {
    serde_json::to_writer(&mut out, &WireRecord::from(record))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn serialize_trace(records: &[TraceRecord]) -> String {
    let mut buf = Vec::new();
    write_trace(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}
