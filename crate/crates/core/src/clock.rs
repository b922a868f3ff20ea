use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// Milliseconds of simulated time.
pub type Timestamp = u64;

/// Shared simulated clock injected into every service.
///
/// Clones observe the same time. Time only moves when [`SimClock::advance`]
/// is called, which keeps expiry and timestamps reproducible.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    now: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new(start: Timestamp) -> Self {
        Self { now: Arc::new(AtomicU64::new(start)) }
    }

    pub fn now(&self) -> Timestamp {
        self.now.load(Ordering::SeqCst)
    }

    pub fn advance(&self, ms: u64) -> Timestamp {
        self.now.fetch_add(ms, Ordering::SeqCst) + ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_share_time() {
        let a = SimClock::new(10);
        let b = a.clone();
        a.advance(5);
        assert_eq!(b.now(), 15);
    }
}
