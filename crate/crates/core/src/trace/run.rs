use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;

use crate::error::Result;
use crate::trace::record::{parse_trace, write_trace, TraceRecord};

/// File extension of per-process trace files inside a run directory.
pub const TRACE_EXT: &str = "ndjson";

/// One training run: the records of every process, each in stream order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub id: String,
    pub processes: BTreeMap<u64, Vec<TraceRecord>>,
}

impl Run {
    pub fn from_records(id: impl Into<String>, records: impl IntoIterator<Item = TraceRecord>) -> Self {
        let mut processes: BTreeMap<u64, Vec<TraceRecord>> = BTreeMap::new();
        for r in records {
            processes.entry(r.pid).or_default().push(r);
        }
        Run {
            id: id.into(),
            processes,
        }
    }

    /// Reads every `*.ndjson` file of a run directory. Files are parsed in
    /// parallel and concatenated in file-name order.
    pub fn read_dir(dir: &Path) -> Result<Run> {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == TRACE_EXT))
            .collect();
        files.sort();
        let parsed: Vec<Vec<TraceRecord>> = files
            .par_iter()
            .map(|p| parse_trace(BufReader::new(File::open(p)?)))
            .collect::<Result<_>>()?;
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Run::from_records(id, parsed.into_iter().flatten()))
    }

    /// Writes one `trace_p<pid>.ndjson` file per process.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.processes
            .par_iter()
            .map(|(pid, recs)| {
                let file = File::create(dir.join(format!("trace_p{pid}.{TRACE_EXT}")))?;
                write_trace(BufWriter::new(file), recs)
            })
            .collect::<Result<()>>()
    }

    pub fn record_count(&self) -> usize {
        self.processes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.record_count() == 0
    }

    /// All records merged into one stream ordered by `(ts, pid)`; each
    /// process keeps its own order.
    pub fn merged(&self) -> Vec<TraceRecord> {
        merge_streams(self.processes.values().map(Vec::as_slice))
    }
}

/// k-way merge of per-process streams by `(ts, stream index)`.
pub fn merge_streams<'a>(streams: impl IntoIterator<Item = &'a [TraceRecord]>) -> Vec<TraceRecord> {
    let streams: Vec<&[TraceRecord]> = streams.into_iter().collect();
    let mut heap = BinaryHeap::new();
    for (i, s) in streams.iter().enumerate() {
        if let Some(r) = s.first() {
            heap.push(Reverse((r.ts, i, 0usize)));
        }
    }
    let mut out = Vec::with_capacity(streams.iter().map(|s| s.len()).sum());
    while let Some(Reverse((_, i, j))) = heap.pop() {
        out.push(streams[i][j].clone());
        if let Some(next) = streams[i].get(j + 1) {
            heap.push(Reverse((next.ts, i, j + 1)));
        }
    }
    out
}
