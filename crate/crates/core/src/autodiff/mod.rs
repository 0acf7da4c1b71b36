//! Reverse-mode differentiation over whole matrices.
//!
//! Ops are recorded on a [`Tape`] as they run; each op carries a hand-written
//! vector-Jacobian product. Modules outside this one add their own ops by
//! implementing [`Function`] (see `fusion` for slerp and `losses` for the
//! alignment and uniformity terms).

mod adam;
mod ops;
mod tape;

pub use adam::{Adam, Param};
pub use ops::SparseOperator;
pub use tape::{Function, Gradients, Tape, Var};
