//! Per-thread accounting of live tensor buffers and gradient tapes.
//!
//! Every tensor buffer registers its byte size on allocation and releases it
//! on drop, so the counters reflect exactly the buffers that are reachable
//! from the running computation: model weights, gradients, optimizer state,
//! recorded chain nodes and values saved by gradient tapes. A value saved by
//! a tape is shared with the forward result, so it is counted once.
//!
//! Counters are thread-local. A computation and its tapes are confined to one
//! thread, which keeps measurements deterministic even when tests run in
//! parallel.

use std::cell::Cell;

#[derive(Default, Clone, Copy)]
struct Counters {
    live_bytes: usize,
    peak_bytes: usize,
    budget: Option<usize>,
    over_budget: bool,
    live_tapes: usize,
    peak_tapes: usize,
}

thread_local! {
    static COUNTERS: Cell<Counters> = Cell::new(Counters::default());
}

fn update(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

fn read() -> Counters {
    COUNTERS.with(|c| c.get())
}

pub(crate) fn on_alloc(bytes: usize) {
    update(|c| {
        c.live_bytes += bytes;
        if c.live_bytes > c.peak_bytes {
            c.peak_bytes = c.live_bytes;
        }
        if let Some(b) = c.budget {
            if c.live_bytes > b {
                c.over_budget = true;
            }
        }
    });
}

pub(crate) fn on_free(bytes: usize) {
    update(|c| c.live_bytes = c.live_bytes.saturating_sub(bytes));
}

pub(crate) fn on_tape_open() {
    update(|c| {
        c.live_tapes += 1;
        c.peak_tapes = c.peak_tapes.max(c.live_tapes);
    });
}

pub(crate) fn on_tape_close() {
    update(|c| c.live_tapes = c.live_tapes.saturating_sub(1));
}

/// Bytes currently held by tensor buffers on this thread.
pub fn live_bytes() -> usize {
    read().live_bytes
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    read().peak_bytes
}

/// Number of gradient-recording tapes currently alive on this thread.
pub fn live_tapes() -> usize {
    read().live_tapes
}

pub fn peak_tapes() -> usize {
    read().peak_tapes
}

/// Restart peak tracking from the current live values.
pub fn reset_peak() {
    update(|c| {
        c.peak_bytes = c.live_bytes;
        c.peak_tapes = c.live_tapes;
    });
}

/// Install (or clear) a soft byte budget. Crossing it only raises a flag,
/// checked by long-running loops through [`over_budget`].
pub fn set_budget(budget: Option<usize>) {
    update(|c| {
        c.budget = budget;
        c.over_budget = false;
    });
}

pub fn budget() -> Option<usize> {
    read().budget
}

pub fn over_budget() -> bool {
    read().over_budget
}
