pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{finite_diff_check, CheckReport, Graph, NodeId, OpKind, Tensor};
