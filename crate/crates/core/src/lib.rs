pub mod error;
pub mod eval;
pub mod grid;
pub mod map;
pub mod opf;
pub mod pipeline;
pub mod proxalg;
pub mod qp;
pub mod scenario;
pub mod sensitivity;
pub mod type1;
pub mod type2;

pub use error::{Error, ErrorKind, Result};
