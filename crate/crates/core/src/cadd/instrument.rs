//! Counts CaDD objects built on the current thread, so tests can assert
//! that inference never touches the contrastive machinery.

use std::cell::Cell;

thread_local! {
    static PATCHES: Cell<u64> = const { Cell::new(0) };
    static SAMPLES: Cell<u64> = const { Cell::new(0) };
    static LOSS_CALLS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn patch_built() {
    PATCHES.with(|c| c.set(c.get() + 1));
}

pub(crate) fn sample_built(n: usize) {
    SAMPLES.with(|c| c.set(c.get() + n as u64));
}

pub(crate) fn loss_called() {
    LOSS_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub patches: u64,
    pub samples: u64,
    pub loss_calls: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.patches + self.samples + self.loss_calls
    }
}

pub fn counts() -> Counts {
    Counts {
        patches: PATCHES.with(|c| c.get()),
        samples: SAMPLES.with(|c| c.get()),
        loss_calls: LOSS_CALLS.with(|c| c.get()),
    }
}

pub fn reset() {
    PATCHES.with(|c| c.set(0));
    SAMPLES.with(|c| c.set(0));
    LOSS_CALLS.with(|c| c.set(0));
}
