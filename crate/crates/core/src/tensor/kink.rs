//! Trace of the discrete decisions made during a forward pass: ReLU signs,
//! max arguments and the grid cells of bilinear reads. Between two inputs
//! with the same trace the computed function is smooth, which the gradient
//! checker relies on to keep finite differences off the kinks.
//!
//! Recording is per thread and off unless [`traced`] is running.

use std::cell::Cell;

thread_local! {
    static TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

const PRIME: u64 = 0x100_0000_01b3;

#[inline]
pub(crate) fn enabled() -> bool {
    TRACE.with(|t| t.get().is_some())
}

/// Folds `values` into the active trace; a no-op when tracing is off.
pub(crate) fn record(values: impl IntoIterator<Item = u64>) {
    TRACE.with(|t| {
        if let Some(mut h) = t.get() {
            for v in values {
                h = (h ^ v).wrapping_mul(PRIME);
            }
            t.set(Some(h));
        }
    });
}

/// Runs `f` with tracing on and returns its result with the trace hash.
pub fn traced<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325)));
    let r = f();
    let h = TRACE.with(|t| t.replace(outer)).expect("trace active");
    (r, h)
}
