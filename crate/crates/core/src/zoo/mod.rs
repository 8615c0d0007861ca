//! Architecture grammar, model instantiation and the exploration grids.

mod arch;
mod enumerate;
mod model;

pub use arch::*;
pub use enumerate::*;
pub use model::*;
