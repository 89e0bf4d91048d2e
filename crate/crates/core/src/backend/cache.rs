use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{prompt_id, Backend, BackendError, ProbeResult, TopKDistribution, ABSENT};

pub const CACHE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format: u32,
    pub k: usize,
    pub style: String,
}

impl CacheHeader {
    pub fn new(k: usize, style: &str) -> Self {
        CacheHeader {
            format: CACHE_FORMAT,
            k,
            style: style.to_string(),
        }
    }
}

/// One line of a probe cache; also the body of an HTTP probe response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub prompt_id: String,
    pub prompt: String,
    pub topk: Vec<(String, f64)>,
    pub subjects: BTreeMap<String, i64>,
}

impl From<&ProbeResult> for CacheRecord {
    fn from(r: &ProbeResult) -> Self {
        CacheRecord {
            prompt_id: r.prompt_id.clone(),
            prompt: r.prompt.clone(),
            topk: r.dist.entries().to_vec(),
            subjects: r
                .subjects
                .iter()
                .map(|(k, v)| (k.clone(), v.map_or(ABSENT, |i| i as i64)))
                .collect(),
        }
    }
}

impl TryFrom<CacheRecord> for ProbeResult {
    type Error = BackendError;

    fn try_from(rec: CacheRecord) -> Result<Self, Self::Error> {
        let dist = TopKDistribution::new(rec.topk)?;
        let mut subjects = BTreeMap::new();
        for (name, idx) in rec.subjects {
            let idx = match idx {
                ABSENT => None,
                i if i >= 0 => Some(i as usize),
                i => {
                    return Err(BackendError::Malformed(format!(
                        "subject {name:?} has index {i}"
                    )))
                }
            };
            subjects.insert(name, idx);
        }
        let res = ProbeResult {
            prompt_id: rec.prompt_id,
            prompt: rec.prompt,
            dist,
            subjects,
        };
        res.validate()?;
        Ok(res)
    }
}

/// Read-only probe cache keyed by prompt id.
#[derive(Debug, Clone)]
pub struct CacheBackend {
    header: CacheHeader,
    records: HashMap<String, ProbeResult>,
    source: String,
}

impl CacheBackend {
    pub fn from_records(
        header: CacheHeader,
        records: impl IntoIterator<Item = ProbeResult>,
    ) -> Self {
        CacheBackend {
            header,
            records: records
                .into_iter()
                .map(|r| (r.prompt_id.clone(), r))
                .collect(),
            source: "memory".into(),
        }
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, prompt: &str) -> Option<&ProbeResult> {
        self.records.get(&prompt_id(prompt))
    }
}

impl Backend for CacheBackend {
    fn probe_raw(
        &self,
        prompt: &str,
        _subjects: &[&str],
        k: usize,
    ) -> Result<ProbeResult, BackendError> {
        let id = prompt_id(prompt);
        let rec = self
            .records
            .get(&id)
            .ok_or(BackendError::CacheMiss { prompt_id: id })?;
        if k > rec.dist.k() {
            return Err(BackendError::InvalidRequest(format!(
                "k={k} exceeds cached k={}",
                rec.dist.k()
            )));
        }
        Ok(rec.clone())
    }

    fn describe(&self) -> String {
        format!("cache:{}", self.source)
    }
}

pub fn open_cache(path: impl AsRef<Path>) -> Result<CacheBackend, BackendError> {
    let path = path.as_ref();
    let io_err = |source| BackendError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut lines = reader.lines().enumerate();

    let header_line = match lines.next() {
        Some((_, l)) => l.map_err(io_err)?,
        None => {
            return Err(BackendError::Record {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let raw: serde_json::Value =
        serde_json::from_str(&header_line).map_err(|e| BackendError::Record {
            line: 1,
            msg: e.to_string(),
        })?;
    let found = raw.get("format").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != CACHE_FORMAT as u64 {
        return Err(BackendError::Version {
            found,
            expected: CACHE_FORMAT,
        });
    }
    let header: CacheHeader =
        serde_json::from_value(raw).map_err(|e| BackendError::Record {
            line: 1,
            msg: e.to_string(),
        })?;

    let mut records = HashMap::new();
    for (idx, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| BackendError::Record {
            line: line_no,
            msg: e.to_string(),
        })?;
        if rec.prompt_id != prompt_id(&rec.prompt) {
            return Err(BackendError::Record {
                line: line_no,
                msg: format!("prompt_id {} does not match prompt text", rec.prompt_id),
            });
        }
        if rec.topk.len() != header.k {
            return Err(BackendError::Record {
                line: line_no,
                msg: format!("{} entries, header k={}", rec.topk.len(), header.k),
            });
        }
        let res = ProbeResult::try_from(rec).map_err(|e| BackendError::Record {
            line: line_no,
            msg: e.to_string(),
        })?;
        records.insert(res.prompt_id.clone(), res);
    }
    Ok(CacheBackend {
        header,
        records,
        source: path.display().to_string(),
    })
}

pub fn write_cache<'a>(
    path: impl AsRef<Path>,
    header: &CacheHeader,
    records: impl IntoIterator<Item = &'a ProbeResult>,
) -> Result<(), BackendError> {
    let path = path.as_ref();
    let io_err = |source| BackendError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let to_io = |e: serde_json::Error| io_err(std::io::Error::other(e));
    serde_json::to_writer(&mut w, header).map_err(to_io)?;
    w.write_all(b"\n").map_err(io_err)?;
    for r in records {
        serde_json::to_writer(&mut w, &CacheRecord::from(r)).map_err(to_io)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
