pub mod blocktri;
pub mod channel;
pub mod em;
pub mod error;
pub mod harness;
pub mod network;
pub mod optimizer;
pub mod validate;

pub use error::{Error, Result};
