use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::CacheError;

/// Byte budget for everything the proxy keeps in its own memory.
#[derive(Debug)]
pub struct MemoryBudget {
    limit: u64,
    used: Mutex<u64>,
    cond: Condvar,
}

/// Bytes held against a [`MemoryBudget`]; returned on drop.
#[derive(Debug)]
pub struct Reservation {
    budget: Arc<MemoryBudget>,
    bytes: u64,
}

impl Reservation {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        if self.bytes > 0 {
            *self.budget.used.lock() -= self.bytes;
            self.budget.cond.notify_all();
        }
    }
}

impl MemoryBudget {
    pub fn new(limit: u64) -> Arc<MemoryBudget> {
        Arc::new(MemoryBudget { limit, used: Mutex::new(0), cond: Condvar::new() })
    }

    pub fn limit(&self) -> u64 {
        self.limit
    }

    pub fn used(&self) -> u64 {
        *self.used.lock()
    }

    pub fn available(&self) -> u64 {
        self.limit - self.used()
    }

    pub fn try_reserve(self: &Arc<Self>, bytes: u64) -> Result<Reservation, CacheError> {
        let mut used = self.used.lock();
        let available = self.limit - *used;
        if bytes > available {
            return Err(CacheError::Budget { requested: bytes, available });
        }
        *used += bytes;
        Ok(Reservation { budget: self.clone(), bytes })
    }

    /// Wait up to `timeout` for `bytes` to become free.
    pub fn reserve(self: &Arc<Self>, bytes: u64, timeout: Duration) -> Result<Reservation, CacheError> {
        if bytes > self.limit {
            return Err(CacheError::Budget { requested: bytes, available: self.available() });
        }
        let mut used = self.used.lock();
        while self.limit - *used < bytes {
            if self.cond.wait_for(&mut used, timeout).timed_out() && self.limit - *used < bytes {
                return Err(CacheError::Budget { requested: bytes, available: self.limit - *used });
            }
        }
        *used += bytes;
        Ok(Reservation { budget: self.clone(), bytes })
    }
}
