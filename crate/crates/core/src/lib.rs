pub mod concepts;
pub mod consensus;
pub mod dynhead;
pub mod encdec;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod maskgeo;
pub mod model;
pub mod nn;
pub mod semknow;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
