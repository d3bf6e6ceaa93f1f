//! JSON-lines audit log of every provider call.

use super::{ChatReply, ChatRequest, LlmError, Message, Usage};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub provider: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub messages: Vec<Message>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub latency_ms: u64,
}

impl CallRecord {
    pub fn new(
        provider: &str,
        request: &ChatRequest,
        result: &Result<ChatReply, LlmError>,
        latency_ms: u64,
    ) -> Self {
        let (response, error, usage) = match result {
            Ok(reply) => (Some(reply.content.clone()), None, reply.usage),
            Err(e) => (None, Some(e.to_string()), None),
        };
        Self {
            provider: provider.to_string(),
            model: request.model.clone(),
            temperature: request.temperature,
            messages: request.messages.clone(),
            response,
            error,
            usage,
            latency_ms,
        }
    }
}

/// Keeps records in memory and, when a path is given, appends each one as a
/// JSON line.
#[derive(Debug, Default)]
pub struct TranscriptSink {
    records: Mutex<Vec<CallRecord>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl TranscriptSink {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { records: Mutex::new(Vec::new()), file: Some(Mutex::new(file)), path: Some(path) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record(&self, record: CallRecord) {
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&record).expect("call record serializes");
            line.push('\n');
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = f.write_all(line.as_bytes()) {
                log::error!("failed to append transcript record: {e}");
            }
        }
        self.records.lock().unwrap_or_else(|e| e.into_inner()).push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> std::io::Result<Vec<CallRecord>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?,
            );
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatExchange, Gateway, MockProvider};

    #[test]
    fn records_successes_and_failures_to_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logs/t.jsonl");
        let gw = Gateway::mock(MockProvider::new().with_queue(["first"]))
            .with_transcript(TranscriptSink::to_file(&path).unwrap());
        gw.complete(&mut ChatExchange::new("sys", "one")).unwrap();
        assert!(gw.complete(&mut ChatExchange::new("sys", "two")).is_err());
        let on_disk = TranscriptSink::read_jsonl(&path).unwrap();
        assert_eq!(on_disk, gw.transcript().unwrap().records());
        assert_eq!(on_disk.len(), 2);
        assert_eq!(on_disk[0].response.as_deref(), Some("first"));
        assert!(on_disk[1].error.is_some());
        assert_eq!(on_disk[1].messages[1].content, "two");
    }
}
