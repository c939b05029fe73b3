//! Deterministic provider driven by a JSON-lines script.
//!
//! Each line is one reply:
//!
//! ```json
//! {"choices": ["```\nreturn a + b\n```"], "usage": {"input_tokens": 120, "output_tokens": 9}}
//! ```
//!
//! Optional fields: `seq` (serve only at that 0-based call index),
//! `fingerprint` (serve only for that request fingerprint), `times` (reuse
//! the record that many times, default 1), and `fail` (`"transport"` or an
//! HTTP status) to simulate a failing call. Unconstrained records are served
//! in file order. Running out of records is an error.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, Completion, LlmError, SampleRequest};
use crate::domain::Usage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptFailure {
    Status(u16),
    Kind(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRecord {
    #[serde(default)]
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<ScriptFailure>,
}

impl ScriptRecord {
    pub fn reply(choices: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            choices: choices.into_iter().map(Into::into).collect(),
            usage: None,
            seq: None,
            fingerprint: None,
            times: None,
            fail: None,
        }
    }

    pub fn with_usage(mut self, input_tokens: u64, output_tokens: u64) -> Self {
        self.usage = Some(Usage {
            input_tokens,
            output_tokens,
        });
        self
    }

    pub fn times(mut self, times: usize) -> Self {
        self.times = Some(times);
        self
    }

    pub fn failing(kind: ScriptFailure) -> Self {
        let mut r = Self::reply(Vec::<String>::new());
        r.fail = Some(kind);
        r
    }
}

#[derive(Debug)]
struct Slot {
    record: ScriptRecord,
    remaining: usize,
}

#[derive(Debug)]
pub struct ScriptedBackend {
    slots: Mutex<Vec<Slot>>,
    cap: Option<u32>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(records: Vec<ScriptRecord>) -> Self {
        let slots = records
            .into_iter()
            .map(|record| Slot {
                remaining: record.times.unwrap_or(1),
                record,
            })
            .collect();
        Self {
            slots: Mutex::new(slots),
            cap: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ScriptRecord = serde_json::from_str(line)
                .map_err(|e| LlmError::Script(format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self::new(records))
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    /// Caps `n` per call, like a provider that limits samples per request.
    pub fn with_cap(mut self, cap: u32) -> Self {
        self.cap = Some(cap);
        self
    }

    /// Calls served so far (including failing ones).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn take(&self, call: usize, fingerprint: &str) -> Option<ScriptRecord> {
        let mut slots = self.slots.lock().expect("script slots");
        let live = |s: &Slot| s.remaining > 0;
        let pick = slots
            .iter()
            .position(|s| live(s) && s.record.seq == Some(call))
            .or_else(|| {
                slots.iter().position(|s| {
                    live(s)
                        && s.record.seq.is_none()
                        && s.record.fingerprint.as_deref() == Some(fingerprint)
                })
            })
            .or_else(|| {
                slots.iter().position(|s| {
                    live(s) && s.record.seq.is_none() && s.record.fingerprint.is_none()
                })
            })?;
        let slot = &mut slots[pick];
        slot.remaining -= 1;
        Some(slot.record.clone())
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &SampleRequest, n: u32) -> Result<Completion, LlmError> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let record = self
            .take(call, &request.fingerprint())
            .ok_or(LlmError::ScriptExhausted(call))?;
        match record.fail {
            Some(ScriptFailure::Status(status)) => {
                return Err(LlmError::Provider {
                    status,
                    body: "scripted failure".into(),
                })
            }
            Some(ScriptFailure::Kind(kind)) if kind == "context_length" => {
                return Err(LlmError::BudgetExceeded("scripted".into()))
            }
            Some(ScriptFailure::Kind(kind)) => return Err(LlmError::Transport(kind)),
            None => {}
        }
        let mut choices = record.choices;
        choices.truncate(n as usize);
        Ok(Completion {
            choices,
            usage: record.usage,
        })
    }

    fn max_n(&self) -> Option<u32> {
        self.cap
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::request;
    use super::super::{Client, RetryPolicy, Sampler};
    use super::*;
    use crate::tokenizer::DefaultSplit;
    use std::sync::Arc;
    use std::time::Duration;

    fn client(b: ScriptedBackend, retries: u32) -> Client<ScriptedBackend> {
        Client::new(
            b,
            RetryPolicy {
                max_retries: retries,
                base_delay: Duration::ZERO,
            },
            Arc::new(DefaultSplit),
        )
    }

    #[test]
    fn echoes_single_reply() {
        let c = client(
            ScriptedBackend::new(vec![ScriptRecord::reply(["hello"])]),
            0,
        );
        let r = c.sample(&request(1)).unwrap();
        assert_eq!(r.choices, vec!["hello".to_string()]);
    }

    #[test]
    fn stitches_capped_requests() {
        let records = (0..5)
            .map(|i| {
                ScriptRecord::reply((0..10).map(|j| format!("c{i}-{j}")))
                    .with_usage(100 + i, 10 * (i + 1))
            })
            .collect();
        let c = client(ScriptedBackend::new(records).with_cap(10), 0);
        let r = c.sample(&request(50)).unwrap();
        assert_eq!(c.backend().calls(), 5);
        assert_eq!(r.calls.len(), 5);
        assert_eq!(r.choices.len(), 50);
        // inputs 100+101+102+103+104, outputs 10+20+30+40+50
        assert_eq!(
            r.usage,
            Usage {
                input_tokens: 510,
                output_tokens: 150
            }
        );
    }

    #[test]
    fn exhaustion_is_an_error() {
        let c = client(ScriptedBackend::new(vec![]), 0);
        assert!(matches!(
            c.sample(&request(1)),
            Err(LlmError::ScriptExhausted(0))
        ));
    }

    #[test]
    fn scripted_failures_are_retried() {
        let b = ScriptedBackend::new(vec![
            ScriptRecord::failing(ScriptFailure::Kind("transport".into())).times(2),
            ScriptRecord::reply(["x"]),
        ]);
        let c = client(b, 3);
        let r = c.sample(&request(1)).unwrap();
        assert_eq!(r.calls[0].attempts, 3);
    }

    #[test]
    fn seq_and_fingerprint_matching() {
        let req = request(1);
        let mut by_fp = ScriptRecord::reply(["fp"]);
        by_fp.fingerprint = Some(req.fingerprint());
        let mut at_two = ScriptRecord::reply(["seq2"]);
        at_two.seq = Some(2);
        let b = ScriptedBackend::new(vec![at_two, ScriptRecord::reply(["plain"]), by_fp]);
        assert_eq!(b.complete(&req, 1).unwrap().choices, vec!["fp"]);
        assert_eq!(b.complete(&req, 1).unwrap().choices, vec!["plain"]);
        assert_eq!(b.complete(&req, 1).unwrap().choices, vec!["seq2"]);
    }

    #[test]
    fn parses_jsonl() {
        let text = "{\"choices\":[\"a\",\"b\"],\"usage\":{\"input_tokens\":3,\"output_tokens\":2}}\n\n{\"fail\":503}\n";
        let b = ScriptedBackend::from_jsonl(text).unwrap();
        let c = b.complete(&request(5), 5).unwrap();
        assert_eq!(c.choices.len(), 2);
        assert!(matches!(
            b.complete(&request(5), 5),
            Err(LlmError::Provider { status: 503, .. })
        ));
        assert!(ScriptedBackend::from_jsonl("{not json").is_err());
    }
}
