use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{prompt_id, Backend, BackendError, CacheRecord, ProbeResult};

/// Body of `POST /probe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRequest {
    pub prompt: String,
    pub k: usize,
    pub subjects: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    pub retries: usize,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            timeout: Duration::from_secs(30),
            retries: 2,
            max_in_flight: 8,
        }
    }
}

struct Budget {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Budget {
    fn acquire(&self) -> BudgetGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        BudgetGuard(self)
    }
}

struct BudgetGuard<'a>(&'a Budget);

impl Drop for BudgetGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Remote inference over a single JSON request/response per prompt.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    retries: usize,
    budget: Budget,
}

impl HttpBackend {
    pub fn open(endpoint: &str, cfg: HttpConfig) -> Result<Self, BackendError> {
        if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
            return Err(BackendError::InvalidRequest(format!(
                "endpoint {endpoint:?} is not an http(s) URL"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with("/probe") {
            base.to_string()
        } else {
            format!("{base}/probe")
        };
        Ok(HttpBackend {
            agent,
            url,
            retries: cfg.retries,
            budget: Budget {
                free: Mutex::new(cfg.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
        })
    }

    fn send_once(&self, req: &ProbeRequest) -> Result<CacheRecord, Attempt> {
        let _slot = self.budget.acquire();
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(req)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 500 {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(BackendError::Status(status)));
        }
        resp.body_mut()
            .read_json::<CacheRecord>()
            .map_err(|e| Attempt::Fatal(BackendError::Malformed(e.to_string())))
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl Backend for HttpBackend {
    fn probe_raw(
        &self,
        prompt: &str,
        subjects: &[&str],
        k: usize,
    ) -> Result<ProbeResult, BackendError> {
        let req = ProbeRequest {
            prompt: prompt.to_string(),
            k,
            subjects: subjects.iter().map(|s| s.to_string()).collect(),
        };
        let attempts = self.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self.send_once(&req) {
                Ok(rec) => {
                    if rec.topk.len() != k {
                        return Err(BackendError::Malformed(format!(
                            "expected {k} entries, got {}",
                            rec.topk.len()
                        )));
                    }
                    if rec.prompt_id != prompt_id(prompt) {
                        return Err(BackendError::Malformed(format!(
                            "response prompt_id {} does not match request",
                            rec.prompt_id
                        )));
                    }
                    return ProbeResult::try_from(rec);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::Transport {
            attempts,
            msg: last,
        })
    }

    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }
}
