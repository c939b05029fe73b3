use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LlmError, SampleRequest, SampleResponse, Sampler};
use crate::store::{fingerprint, CacheMode, CacheRecord, RecordKind, Store};

/// Stored form of a call that failed in a way the repair loop tolerates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StoredFailure {
    Transport { message: String },
    Provider { status: u16, body: String },
    ContextLength { message: String },
    Empty,
}

impl StoredFailure {
    fn from_error(e: &LlmError) -> Option<Self> {
        Some(match e {
            LlmError::Transport(m) => StoredFailure::Transport { message: m.clone() },
            LlmError::Provider { status, body } => StoredFailure::Provider {
                status: *status,
                body: body.clone(),
            },
            LlmError::BudgetExceeded(m) => StoredFailure::ContextLength { message: m.clone() },
            LlmError::Empty => StoredFailure::Empty,
            _ => return None,
        })
    }

    fn into_error(self) -> LlmError {
        match self {
            StoredFailure::Transport { message } => LlmError::Transport(message),
            StoredFailure::Provider { status, body } => LlmError::Provider { status, body },
            StoredFailure::ContextLength { message } => LlmError::BudgetExceeded(message),
            StoredFailure::Empty => LlmError::Empty,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Exchange {
    request: SampleRequest,
    occurrence: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<SampleResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure: Option<StoredFailure>,
}

/// Replayable sampler for one bug.
///
/// Identical requests are told apart by their occurrence count within the
/// run, so a rebooted round that repeats the initiation prompt gets a fresh
/// sample in record mode and the same sequence on replay.
pub struct CachedSampler<'a> {
    inner: &'a dyn Sampler,
    store: &'a Store,
    bug_id: String,
    occurrences: Mutex<HashMap<String, u32>>,
}

impl<'a> CachedSampler<'a> {
    pub fn new(inner: &'a dyn Sampler, store: &'a Store, bug_id: &str) -> Self {
        Self {
            inner,
            store,
            bug_id: bug_id.to_string(),
            occurrences: Mutex::new(HashMap::new()),
        }
    }

    fn next_occurrence(&self, fp: &str) -> u32 {
        let mut occ = self.occurrences.lock().expect("occurrences");
        let slot = occ.entry(fp.to_string()).or_insert(0);
        let current = *slot;
        *slot += 1;
        current
    }
}

impl Sampler for CachedSampler<'_> {
    fn sample(&self, request: &SampleRequest) -> Result<SampleResponse, LlmError> {
        if self.store.mode() == CacheMode::Passthrough {
            return self.inner.sample(request);
        }
        let request_fp = request.fingerprint();
        let occurrence = self.next_occurrence(&request_fp);
        let key = fingerprint(&[b"llm", request_fp.as_bytes(), &occurrence.to_le_bytes()]);

        if let Some(record) = self.store.get_in(&self.bug_id, &key)? {
            let exchange: Exchange = serde_json::from_value(record.payload).map_err(|e| {
                LlmError::Storage(crate::store::StoreError::Corruption(format!(
                    "unreadable exchange {key}: {e}"
                )))
            })?;
            return match (exchange.response, exchange.failure) {
                (Some(resp), _) => Ok(resp),
                (None, Some(f)) => Err(f.into_error()),
                (None, None) => Err(LlmError::Storage(crate::store::StoreError::Corruption(
                    format!("exchange {key} has neither response nor failure"),
                ))),
            };
        }
        if self.store.mode() == CacheMode::Replay {
            return Err(LlmError::ReplayMiss(request_fp));
        }

        let result = self.inner.sample(request);
        let exchange = match &result {
            Ok(resp) => Some(Exchange {
                request: request.clone(),
                occurrence,
                response: Some(resp.clone()),
                failure: None,
            }),
            Err(e) => StoredFailure::from_error(e).map(|f| Exchange {
                request: request.clone(),
                occurrence,
                response: None,
                failure: Some(f),
            }),
        };
        if let Some(exchange) = exchange {
            let payload =
                serde_json::to_value(&exchange).map_err(crate::store::StoreError::from)?;
            self.store.put(CacheRecord::new(
                &self.bug_id,
                key,
                RecordKind::LlmExchange,
                payload,
                &request.template_version,
            ))?;
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::request;
    use super::super::{Client, RetryPolicy, ScriptRecord, ScriptedBackend};
    use super::*;
    use crate::tokenizer::DefaultSplit;
    use std::sync::Arc;
    use std::time::Duration;

    fn scripted(replies: &[&str]) -> Client<ScriptedBackend> {
        Client::new(
            ScriptedBackend::new(replies.iter().map(|r| ScriptRecord::reply([*r])).collect()),
            RetryPolicy {
                max_retries: 0,
                base_delay: Duration::ZERO,
            },
            Arc::new(DefaultSplit),
        )
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let live = scripted(&["first", "second"]);
        {
            let store = Store::open(dir.path(), CacheMode::Record).unwrap();
            let s = CachedSampler::new(&live, &store, "b");
            assert_eq!(s.sample(&request(1)).unwrap().choices, vec!["first"]);
            // same request again is a new occurrence, not a cache hit
            assert_eq!(s.sample(&request(1)).unwrap().choices, vec!["second"]);
        }
        assert_eq!(live.backend().calls(), 2);

        let dead = scripted(&[]);
        let store = Store::open(dir.path(), CacheMode::Replay).unwrap();
        let s = CachedSampler::new(&dead, &store, "b");
        assert_eq!(s.sample(&request(1)).unwrap().choices, vec!["first"]);
        assert_eq!(s.sample(&request(1)).unwrap().choices, vec!["second"]);
        assert!(matches!(
            s.sample(&request(1)),
            Err(LlmError::ReplayMiss(_))
        ));
        assert_eq!(dead.backend().calls(), 0);
    }

    #[test]
    fn replay_cold_cache_misses() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("none"), CacheMode::Replay).unwrap();
        let dead = scripted(&[]);
        let s = CachedSampler::new(&dead, &store, "b");
        assert!(matches!(
            s.sample(&request(1)),
            Err(LlmError::ReplayMiss(_))
        ));
    }

    #[test]
    fn failures_are_replayed() {
        let dir = tempfile::tempdir().unwrap();
        let live = Client::new(
            ScriptedBackend::new(vec![ScriptRecord::failing(
                super::super::scripted::ScriptFailure::Status(400),
            )]),
            RetryPolicy {
                max_retries: 0,
                base_delay: Duration::ZERO,
            },
            Arc::new(DefaultSplit),
        );
        {
            let store = Store::open(dir.path(), CacheMode::Record).unwrap();
            let s = CachedSampler::new(&live, &store, "b");
            assert!(s.sample(&request(1)).is_err());
        }
        let store = Store::open(dir.path(), CacheMode::Replay).unwrap();
        let dead = scripted(&[]);
        let s = CachedSampler::new(&dead, &store, "b");
        assert!(matches!(
            s.sample(&request(1)),
            Err(LlmError::Provider { status: 400, .. })
        ));
    }
}
