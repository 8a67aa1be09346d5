//! Line-delimited run-record files: one JSON `SampleRecord` per line with the
//! field names `task_id, seed, sample_index, code, token_count, total_logprob,
//! compiled, correct, speedup, runtime, error_trace, trials`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::{SampleRecord, TaskId};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("duplicate record (task {0}, seed {1}, sample {2})")]
    Duplicate(TaskId, u64, u32),
}

pub fn to_line(record: &SampleRecord) -> String {
    serde_json::to_string(record).expect("records contain only finite numbers")
}

pub fn write_records<W: Write>(out: W, records: &[SampleRecord]) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for r in records {
        out.write_all(to_line(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses and validates records; blank lines are skipped.
pub fn read_records<R: Read>(input: R) -> Result<Vec<SampleRecord>, RecordError> {
    let mut out = Vec::new();
    let mut keys = HashSet::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|source| RecordError::Parse {
                line: i + 1,
                source,
            })?;
        if let Some(reason) = rec.violations().into_iter().next() {
            return Err(RecordError::Invalid {
                line: i + 1,
                reason,
            });
        }
        let (t, s, k) = rec.key();
        if !keys.insert(rec.key()) {
            return Err(RecordError::Duplicate(t, s, k));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<SampleRecord>, RecordError> {
    read_records(File::open(path)?)
}

pub fn save_records(path: &Path, records: &[SampleRecord]) -> io::Result<()> {
    write_records(File::create(path)?, records)
}

/// Groups records by `(task_id, seed)` with each group sorted by sample index.
pub fn group_by_task_seed(records: &[SampleRecord]) -> BTreeMap<(TaskId, u64), Vec<SampleRecord>> {
    let mut groups: BTreeMap<(TaskId, u64), Vec<SampleRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.task_id, r.seed))
            .or_default()
            .push(r.clone());
    }
    for g in groups.values_mut() {
        g.sort_by_key(|r| r.sample_index);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EvalOutcome;

    fn rec(idx: u32) -> SampleRecord {
        SampleRecord {
            task_id: 4,
            seed: 42,
            sample_index: idx,
            code: "fn k() {}\n\"quoted\"".into(),
            token_count: 10,
            total_logprob: -3.25,
            outcome: EvalOutcome::correct(1.5, 0.66, 5),
        }
    }

    #[test]
    fn field_names_are_fixed() {
        let line = to_line(&rec(0));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec![
            "task_id",
            "seed",
            "sample_index",
            "code",
            "token_count",
            "total_logprob",
            "compiled",
            "correct",
            "speedup",
            "runtime",
            "error_trace",
            "trials",
        ];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert!(line.starts_with("{\"task_id\":4,\"seed\":42,\"sample_index\":0,"));
    }

    #[test]
    fn rejects_duplicates_and_bad_chain() {
        let mut buf = Vec::new();
        write_records(&mut buf, &[rec(0), rec(0)]).unwrap();
        assert!(matches!(
            read_records(&buf[..]),
            Err(RecordError::Duplicate(4, 42, 0))
        ));

        let mut bad = rec(1);
        bad.outcome.correct = false;
        let mut buf = Vec::new();
        write_records(&mut buf, &[bad]).unwrap();
        assert!(matches!(
            read_records(&buf[..]),
            Err(RecordError::Invalid { line: 1, .. })
        ));
    }

    #[test]
    fn grouping_sorts_by_index() {
        let mut a = rec(3);
        a.seed = 43;
        let g = group_by_task_seed(&[rec(2), rec(1), a]);
        assert_eq!(g.len(), 2);
        let idx: Vec<u32> = g[&(4, 42)].iter().map(|r| r.sample_index).collect();
        assert_eq!(idx, vec![1, 2]);
    }
}
