pub mod cloud;
pub mod domain;
pub mod edge;
pub mod error;
pub mod explain;
pub mod ml;
pub mod more;
pub mod protocol;
pub mod sim;

pub use error::{Error, Result};
