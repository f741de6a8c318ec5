pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod schedules;
pub mod tape;
pub mod tensor;
pub mod tokenize;

pub use error::{Error, Result};
pub use rng::{Rng, Stream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
