//! Instrumented operation counting.
//!
//! While a [`record`] call is active on the current thread, every numeric
//! primitive reports the floating-point operations it executes and the
//! element count of the array it produces. Counts are attributed to the
//! innermost open [`scope`] label. Outside `record` the hooks are a single
//! thread-local flag check.
//!
//! Convention (shared with the analytic model in `cost`):
//!
//! | primitive                      | FLOPs                      |
//! |--------------------------------|----------------------------|
//! | matmul `M×K · K×P`             | `2·M·K·P` (mul + add)      |
//! | elementwise add/sub/mul/scale  | 1 per output element       |
//! | softmax                        | 4 per element              |
//! | sigmoid                        | 4 per element              |
//! | relu                           | 1 per element              |
//! | layer norm over slices of `L`  | `9·L + 6` per slice        |
//! | transpose, gather, scatter     | 0                          |

use std::cell::RefCell;
use std::collections::BTreeMap;

pub const SOFTMAX_PER_ELEM: u64 = 4;
pub const SIGMOID_PER_ELEM: u64 = 4;
pub const RELU_PER_ELEM: u64 = 1;
pub const LAYERNORM_PER_ELEM: u64 = 9;
pub const LAYERNORM_PER_SLICE: u64 = 6;

/// Label used for work done outside any scope.
pub const UNSCOPED: &str = "unscoped";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub items: BTreeMap<String, u64>,
    /// Largest element count of any array produced by an arithmetic primitive.
    pub peak_elements: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.items.values().sum()
    }
}

#[derive(Default)]
struct Recorder {
    stack: Vec<&'static str>,
    tally: FlopTally,
}

thread_local! {
    static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

/// Runs `f` with counting enabled and returns its result with the tally.
/// Nested calls are not supported; the inner call panics.
pub fn record<R>(f: impl FnOnce() -> R) -> (R, FlopTally) {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        assert!(r.is_none(), "flops::record is not reentrant");
        *r = Some(Recorder::default());
    });
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            RECORDER.with(|r| r.borrow_mut().take());
        }
    }
    let reset = Reset;
    let out = f();
    let tally = RECORDER
        .with(|r| r.borrow_mut().take())
        .map(|r| r.tally)
        .unwrap_or_default();
    drop(reset);
    (out, tally)
}

pub fn is_recording() -> bool {
    RECORDER.with(|r| r.borrow().is_some())
}

/// Guard returned by [`scope`]; pops the label on drop.
#[must_use = "the scope ends when the guard is dropped"]
pub struct ScopeGuard {
    active: bool,
}

pub fn scope(label: &'static str) -> ScopeGuard {
    let active = RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            rec.stack.push(label);
            true
        } else {
            false
        }
    });
    ScopeGuard { active }
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        if self.active {
            RECORDER.with(|r| {
                if let Some(rec) = r.borrow_mut().as_mut() {
                    rec.stack.pop();
                }
            });
        }
    }
}

/// Hook called by primitives.
pub(crate) fn count(flops: u64, out_elements: u64) {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            let label = rec.stack.last().copied().unwrap_or(UNSCOPED);
            if flops > 0 {
                *rec.tally.items.entry(label.to_string()).or_insert(0) += flops;
            }
            rec.tally.peak_elements = rec.tally.peak_elements.max(out_elements);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scopes_attribute_to_innermost_label() {
        let ((), t) = record(|| {
            count(3, 1);
            let _a = scope("outer");
            count(5, 10);
            {
                let _b = scope("inner");
                count(7, 2);
            }
            count(1, 0);
        });
        assert_eq!(t.items[UNSCOPED], 3);
        assert_eq!(t.items["outer"], 6);
        assert_eq!(t.items["inner"], 7);
        assert_eq!(t.peak_elements, 10);
        assert!(!is_recording());
    }

    #[test]
    fn nothing_counted_outside_record() {
        count(100, 100);
        let _s = scope("ignored");
        let ((), t) = record(|| {});
        assert!(t.items.is_empty());
    }
}
