use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, LlmRequest};
use crate::error::{Error, LlmError, Result};

/// One line of a JSON Lines cassette.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub key: String,
    pub request: LlmRequest,
    pub response: String,
    pub created_at: String,
}

pub fn load_cassette(path: impl AsRef<Path>) -> Result<Vec<CassetteRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CassetteRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{} line {}", path.display(), n + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Short content hash identifying a cassette file.
pub fn cassette_id(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}

/// Serves recorded responses by request key; a miss is an error naming the
/// stage, which usually means prompts drifted from the recording.
#[derive(Clone, Debug, Default)]
pub struct ReplayBackend {
    responses: HashMap<String, String>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = CassetteRecord>) -> Self {
        let mut responses = HashMap::new();
        for r in records {
            // First recording wins, matching append-only semantics.
            responses.entry(r.key).or_insert(r.response);
        }
        ReplayBackend { responses }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(ReplayBackend::from_records(load_cassette(path)?))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let key = request.key();
        self.responses
            .get(&key)
            .cloned()
            .ok_or(LlmError::ReplayMiss {
                stage: request.stage,
                key,
            })
    }

    fn name(&self) -> &'static str {
        "replay"
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Append-only cassette writer. Appends are serialized through one lock and
/// keys already present in the file are not written again.
pub struct CassetteWriter {
    path: PathBuf,
    inner: Mutex<(File, HashSet<String>)>,
}

impl CassetteWriter {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let known = if path.exists() {
            load_cassette(&path)?.into_iter().map(|r| r.key).collect()
        } else {
            HashSet::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(CassetteWriter {
            path,
            inner: Mutex::new((file, known)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, request: &LlmRequest, response: &str) -> Result<()> {
        let key = request.key();
        let mut guard = self.inner.lock().expect("cassette lock poisoned");
        if guard.1.contains(&key) {
            return Ok(());
        }
        let record = CassetteRecord {
            key: key.clone(),
            request: request.clone(),
            response: response.to_string(),
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let mut line = serde_json::to_string(&record).map_err(|e| Error::parse("cassette record", e))?;
        line.push('\n');
        guard
            .0
            .write_all(line.as_bytes())
            .and_then(|_| guard.0.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        guard.1.insert(key);
        Ok(())
    }
}
