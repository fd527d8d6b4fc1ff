//! Process-wide call counters used to assert which code paths an
//! ablation mode actually exercises.

use std::sync::atomic::{AtomicU64, Ordering};

pub static GPA_ALIGN_CALLS: AtomicU64 = AtomicU64::new(0);
pub static GTU_MIX_CALLS: AtomicU64 = AtomicU64::new(0);
pub static NUCLEAR_NODE_CALLS: AtomicU64 = AtomicU64::new(0);

pub fn bump(counter: &AtomicU64) {
    counter.fetch_add(1, Ordering::Relaxed);
}

pub fn read(counter: &AtomicU64) -> u64 {
    counter.load(Ordering::Relaxed)
}

pub fn reset_all() {
    GPA_ALIGN_CALLS.store(0, Ordering::Relaxed);
    GTU_MIX_CALLS.store(0, Ordering::Relaxed);
    NUCLEAR_NODE_CALLS.store(0, Ordering::Relaxed);
}
