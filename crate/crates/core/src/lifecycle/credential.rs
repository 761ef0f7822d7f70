use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};

use super::events::{EventBus, EventKind, MonitorEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CredentialState {
    Valid,
    Warning,
    Expired,
    Destroyed,
}

impl CredentialState {
    /// Whether operations needing a credential may proceed.
    pub fn usable(self) -> bool {
        matches!(self, CredentialState::Valid | CredentialState::Warning)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CredentialConfig {
    pub label: String,
    pub ttl_s: f64,
    pub warn_threshold_s: f64,
    /// Minimum spacing of repeated warning events.
    pub warn_repeat_s: f64,
}

impl Default for CredentialConfig {
    fn default() -> Self {
        CredentialConfig {
            label: "mock-proxy".into(),
            ttl_s: 12.0 * 3600.0,
            warn_threshold_s: 600.0,
            warn_repeat_s: 60.0,
        }
    }
}

/// Stand-in for a grid proxy or similar time-limited credential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockCredential {
    pub label: String,
    pub issued_at: DateTime<Utc>,
    pub ttl_s: f64,
    pub warn_threshold_s: f64,
    pub destroyed: bool,
}

impl MockCredential {
    pub fn remaining_s(&self, now: DateTime<Utc>) -> f64 {
        let elapsed = (now - self.issued_at).num_microseconds().unwrap_or(i64::MAX) as f64 / 1e6;
        self.ttl_s - elapsed
    }

    /// A pure function of the clock reading and the credential's fields.
    pub fn state(&self, now: DateTime<Utc>) -> CredentialState {
        if self.destroyed {
            return CredentialState::Destroyed;
        }
        let left = self.remaining_s(now);
        if left <= 0.0 {
            CredentialState::Expired
        } else if left < self.warn_threshold_s {
            CredentialState::Warning
        } else {
            CredentialState::Valid
        }
    }
}

/// Kinds of operation the credential gate knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatedOp {
    Submit,
    Kill,
    Fetch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredentialStatus {
    pub label: String,
    pub state: CredentialState,
    pub issued_at: DateTime<Utc>,
    pub ttl_s: f64,
    pub warn_threshold_s: f64,
    pub remaining_s: f64,
}

struct Inner {
    cred: MockCredential,
    last_warning: Option<DateTime<Utc>>,
}

pub struct CredentialManager {
    clock: Arc<dyn Clock>,
    repeat_s: f64,
    inner: Mutex<Inner>,
}

impl CredentialManager {
    /// Issues a fresh credential at the current clock reading.
    pub fn new(config: &CredentialConfig, clock: Arc<dyn Clock>) -> Self {
        let cred = MockCredential {
            label: config.label.clone(),
            issued_at: clock.now(),
            ttl_s: config.ttl_s,
            warn_threshold_s: config.warn_threshold_s,
            destroyed: false,
        };
        CredentialManager {
            clock,
            repeat_s: config.warn_repeat_s,
            inner: Mutex::new(Inner {
                cred,
                last_warning: None,
            }),
        }
    }

    pub fn status(&self) -> CredentialStatus {
        let now = self.clock.now();
        let inner = self.inner.lock().unwrap();
        let c = &inner.cred;
        CredentialStatus {
            label: c.label.clone(),
            state: c.state(now),
            issued_at: c.issued_at,
            ttl_s: c.ttl_s,
            warn_threshold_s: c.warn_threshold_s,
            remaining_s: c.remaining_s(now).max(0.0),
        }
    }

    /// Current state. In the warning band this emits a
    /// `credential_warning` event, at most once per `warn_repeat_s`.
    pub fn check(&self, bus: &EventBus) -> CredentialState {
        let now = self.clock.now();
        let mut inner = self.inner.lock().unwrap();
        let state = inner.cred.state(now);
        if state == CredentialState::Warning {
            let due = inner
                .last_warning
                .is_none_or(|t| (now - t).num_milliseconds() as f64 / 1000.0 >= self.repeat_s);
            if due {
                inner.last_warning = Some(now);
                let left = inner.cred.remaining_s(now);
                bus.emit(
                    MonitorEvent::new(None, EventKind::CredentialWarning, now)
                        .with("label", inner.cred.label.clone())
                        .with("remaining_s", format!("{left:.3}")),
                );
            }
        }
        state
    }

    /// Re-issues the credential now, with `ttl_s` or the previous lifetime.
    pub fn renew(&self, ttl_s: Option<f64>) -> CredentialStatus {
        {
            let mut inner = self.inner.lock().unwrap();
            inner.cred.issued_at = self.clock.now();
            if let Some(t) = ttl_s {
                inner.cred.ttl_s = t;
            }
            inner.cred.destroyed = false;
            inner.last_warning = None;
        }
        self.status()
    }

    pub fn destroy(&self) -> CredentialStatus {
        self.inner.lock().unwrap().cred.destroyed = true;
        self.status()
    }

    /// Refuses `op` on a backend that needs a credential unless the
    /// credential is valid or in its warning band.
    pub fn gate(&self, op: GatedOp, backend_requires: bool) -> Result<()> {
        if !backend_requires {
            return Ok(());
        }
        match self.status().state {
            CredentialState::Valid | CredentialState::Warning => Ok(()),
            CredentialState::Expired => Err(Error::Gate(format!("credential expired; {op:?} refused").to_lowercase())),
            CredentialState::Destroyed => {
                Err(Error::Gate(format!("credential destroyed; {op:?} refused").to_lowercase()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::FakeClock;

    #[test]
    fn state_is_monotone_in_time() {
        let t0: DateTime<Utc> = "2024-01-01T00:00:00Z".parse().unwrap();
        let c = MockCredential {
            label: "x".into(),
            issued_at: t0,
            ttl_s: 10.0,
            warn_threshold_s: 5.0,
            destroyed: false,
        };
        let mut prev = CredentialState::Valid;
        for ms in (0..12_000).step_by(250) {
            let s = c.state(t0 + chrono::Duration::milliseconds(ms));
            assert!(s >= prev);
            prev = s;
        }
        assert_eq!(c.state(t0 + chrono::Duration::seconds(5)), CredentialState::Valid);
        assert_eq!(c.state(t0 + chrono::Duration::milliseconds(5001)), CredentialState::Warning);
        assert_eq!(c.state(t0 + chrono::Duration::seconds(10)), CredentialState::Expired);
    }

    #[test]
    fn gating_matrix() {
        let clock = FakeClock::new(Utc::now());
        let cfg = CredentialConfig {
            ttl_s: 10.0,
            warn_threshold_s: 5.0,
            ..Default::default()
        };
        let m = CredentialManager::new(&cfg, Arc::new(clock.clone()));
        assert!(m.gate(GatedOp::Submit, true).is_ok());
        clock.advance_secs_f64(11.0);
        assert!(matches!(m.gate(GatedOp::Submit, true), Err(Error::Gate(_))));
        assert!(m.gate(GatedOp::Submit, false).is_ok());
        m.renew(None);
        assert_eq!(m.status().state, CredentialState::Valid);
        m.destroy();
        assert!(matches!(m.gate(GatedOp::Kill, true), Err(Error::Gate(_))));
    }
}
