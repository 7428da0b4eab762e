//! Training and inference for a weight-shared transducer that serves two
//! operating points from one parameter store: a full-context path that sees
//! the whole utterance, and a streaming path that runs on limited-context
//! segments through block-pruned weight views. Includes the f64 autodiff tape,
//! the transducer loss, the pruning and group-lasso machinery, block-sparse
//! inference kernels, and the training loop that ties them together.

pub mod chunking;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod rnnt;
pub mod sparsity;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
