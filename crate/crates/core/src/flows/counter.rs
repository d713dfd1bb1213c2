use std::sync::atomic::{AtomicU64, Ordering};

/// Residual-branch evaluation counters, shared by concurrent evaluations.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward: AtomicU64,
    vjp: AtomicU64,
}

impl PassCounter {
    pub fn add_forward(&self, n: u64) {
        self.forward.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_vjp(&self, n: u64) {
        self.vjp.fetch_add(n, Ordering::Relaxed);
    }

    pub fn forward(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn vjp(&self) -> u64 {
        self.vjp.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.vjp.store(0, Ordering::Relaxed);
    }
}

impl Clone for PassCounter {
    fn clone(&self) -> Self {
        Self { forward: AtomicU64::new(self.forward()), vjp: AtomicU64::new(self.vjp()) }
    }
}

// Counters are bookkeeping, not model state.
impl PartialEq for PassCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
