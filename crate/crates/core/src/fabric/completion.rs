use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::FabricError;

/// Test hook that withholds every completion of a fabric while held.
///
/// Posting still succeeds (the data movement is done at post time); only
/// `Completion::wait` blocks until the gate is released.
#[derive(Default)]
pub struct CompletionGate {
    held: Mutex<bool>,
    cond: Condvar,
}

impl CompletionGate {
    pub fn hold(&self) {
        *self.held.lock() = true;
    }

    pub fn release(&self) {
        *self.held.lock() = false;
        self.cond.notify_all();
    }

    pub fn is_held(&self) -> bool {
        *self.held.lock()
    }

    fn pass(&self) {
        let mut held = self.held.lock();
        while *held {
            self.cond.wait(&mut held);
        }
    }
}

struct Slot<T> {
    value: Mutex<Option<Result<T, FabricError>>>,
    cond: Condvar,
}

/// Producer side of a [`Completion`].
pub(crate) struct Completer<T> {
    slot: Arc<Slot<T>>,
}

impl<T> Completer<T> {
    pub fn complete(self, value: Result<T, FabricError>) {
        *self.slot.value.lock() = Some(value);
        self.slot.cond.notify_all();
    }
}

/// Handle to a posted one-sided operation. Polled by whoever needs the result;
/// the poster is free to continue without waiting.
pub struct Completion<T> {
    slot: Arc<Slot<T>>,
    gate: Arc<CompletionGate>,
}

impl<T> Completion<T> {
    pub(crate) fn pending(gate: Arc<CompletionGate>) -> (Completer<T>, Completion<T>) {
        let slot = Arc::new(Slot { value: Mutex::new(None), cond: Condvar::new() });
        (Completer { slot: slot.clone() }, Completion { slot, gate })
    }

    pub(crate) fn ready(gate: Arc<CompletionGate>, value: Result<T, FabricError>) -> Completion<T> {
        let slot = Arc::new(Slot { value: Mutex::new(Some(value)), cond: Condvar::new() });
        Completion { slot, gate }
    }

    /// True once the result is available and the gate is open.
    pub fn is_ready(&self) -> bool {
        !self.gate.is_held() && self.slot.value.lock().is_some()
    }

    pub fn wait(self) -> Result<T, FabricError> {
        self.gate.pass();
        let mut value = self.slot.value.lock();
        loop {
            if let Some(v) = value.take() {
                return v;
            }
            self.slot.cond.wait(&mut value);
        }
    }

    pub fn wait_timeout(self, timeout: Duration) -> Result<T, FabricError> {
        self.gate.pass();
        let mut value = self.slot.value.lock();
        loop {
            if let Some(v) = value.take() {
                return v;
            }
            if self.slot.cond.wait_for(&mut value, timeout).timed_out() {
                return Err(FabricError::Timeout);
            }
        }
    }
}
