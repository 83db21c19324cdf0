//! Desk-scale verification rig: a miniature multimodal backend and a
//! synthetic scene benchmark.

pub mod backend;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod scene;
pub mod vocab;

pub use backend::{make_toy_backend, Layout, ToyBackend};
pub use model::{ToyModel, ToyModelConfig};
pub use vocab::ToyTokenizer;
