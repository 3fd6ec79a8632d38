pub mod backbone;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fluctuation;
pub mod model;
pub mod moe;
pub mod report;
pub mod routers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
