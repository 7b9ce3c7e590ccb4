use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{Backend, BackendError, BackendRequest, BackendResponse, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub role: Role,
    pub base_url: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub retry_budget: u32,
    /// First retry delay; doubles on each further retry.
    #[serde(with = "millis", default = "default_backoff")]
    pub backoff: Duration,
}

fn default_backoff() -> Duration {
    Duration::from_millis(200)
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

impl BackendEndpoint {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
    pub const TEST_TIMEOUT: Duration = Duration::from_secs(1);

    pub fn new(role: Role, base_url: impl Into<String>) -> Self {
        Self {
            role,
            base_url: base_url.into(),
            token: None,
            timeout: Self::DEFAULT_TIMEOUT,
            retry_budget: 2,
            backoff: default_backoff(),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/v1/{}", self.base_url.trim_end_matches('/'), self.role)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout.is_zero() {
            return Err(BackendError::Protocol(format!(
                "{} endpoint timeout must be > 0",
                self.role
            )));
        }
        if self.base_url.is_empty() {
            return Err(BackendError::Protocol(format!(
                "{} endpoint has no base url",
                self.role
            )));
        }
        Ok(())
    }
}

/// Blocking JSON-over-HTTP client for one role.
pub struct HttpBackend {
    endpoint: BackendEndpoint,
    agent: ureq::Agent,
}

enum Attempt {
    Done(Result<BackendResponse, BackendError>),
    Transport(String),
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        endpoint.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { endpoint, agent })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.endpoint.url())
            .header("Content-Type", "application/json");
        if let Some(token) = &self.endpoint.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transport(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Transport(e.to_string()),
        };
        if !(200..300).contains(&status) {
            return Attempt::Done(Err(BackendError::Rejected {
                role: self.endpoint.role,
                status,
                body: text,
            }));
        }
        Attempt::Done(
            serde_json::from_str::<BackendResponse>(&text)
                .map_err(|e| BackendError::Protocol(format!("bad response body: {e}"))),
        )
    }
}

impl Backend for HttpBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        request.validate()?;
        let body = serde_json::to_string(request)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let budget = self.endpoint.retry_budget;
        let mut cause = String::new();
        for attempt in 0..=budget {
            match self.attempt(&body) {
                Attempt::Done(result) => return result,
                Attempt::Transport(e) => {
                    warn!(role = %self.endpoint.role, attempt, error = %e, "transport failure");
                    cause = e;
                    if attempt < budget {
                        let delay = self.endpoint.backoff * 2u32.saturating_pow(attempt);
                        debug!(?delay, "backing off");
                        thread::sleep(delay);
                    }
                }
            }
        }
        Err(BackendError::Unavailable {
            role: self.endpoint.role,
            attempts: budget + 1,
            cause,
        })
    }
}
