//! Fault injection for validating the gradient checker itself.

use std::cell::Cell;

thread_local! {
    static CORRUPT_ADJOINT: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn adjoint_corrupted() -> bool {
    CORRUPT_ADJOINT.with(Cell::get)
}

/// Runs `f` with the matmul left-operand adjoint scaled by 1.5 on this
/// thread. Forward values are unaffected.
pub fn with_corrupted_adjoint<T>(f: impl FnOnce() -> T) -> T {
    let prev = CORRUPT_ADJOINT.with(|c| c.replace(true));
    let out = f();
    CORRUPT_ADJOINT.with(|c| c.set(prev));
    out
}
