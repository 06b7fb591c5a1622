//! Per-thread multiply-add counter fed by the forward passes of the
//! dense ops (convolution, deformable convolution, matrix product).

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add_macs(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// Multiply-adds counted on this thread since the last reset.
pub fn macs() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_macs() {
    MACS.with(|m| m.set(0));
}
