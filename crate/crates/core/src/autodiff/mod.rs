//! Dense reverse-mode automatic differentiation.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{finite_difference_gradient, relative_error};
pub use params::{ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var, ATTENTION_DEN_GUARD, LAYER_NORM_EPS};
