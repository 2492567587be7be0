use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};

/// Environment variable that pins the clock in debug builds.
pub const CLOCK_ENV: &str = "ARK_CLOCK";

/// Wall clock used for embargo checks. A fixed clock can be moved by tests.
#[derive(Debug, Clone, Default)]
pub struct Clock(Option<Arc<RwLock<DateTime<Utc>>>>);

impl Clock {
    pub fn system() -> Self {
        Clock(None)
    }

    pub fn fixed(at: DateTime<Utc>) -> Self {
        Clock(Some(Arc::new(RwLock::new(at))))
    }

    /// Reads `ARK_CLOCK` (RFC 3339). Release builds ignore it.
    pub fn from_env() -> Result<Self, String> {
        #[cfg(debug_assertions)]
        if let Ok(v) = std::env::var(CLOCK_ENV) {
            return Self::parse(&v).map(Clock::fixed);
        }
        Ok(Clock::system())
    }

    pub fn parse(s: &str) -> Result<DateTime<Utc>, String> {
        DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| format!("{CLOCK_ENV}: {e}"))
    }

    pub fn now(&self) -> DateTime<Utc> {
        match &self.0 {
            Some(t) => *t.read().unwrap(),
            None => Utc::now(),
        }
    }

    /// Moves a fixed clock. Returns false for the system clock.
    pub fn set(&self, at: DateTime<Utc>) -> bool {
        match &self.0 {
            Some(t) => {
                *t.write().unwrap() = at;
                true
            }
            None => false,
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.0.is_some()
    }
}
