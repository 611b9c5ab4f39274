pub mod autograd;
pub mod cache;
pub mod checkpoint;
pub mod conditioning;
pub mod dit;
pub mod error;
pub mod flow;
pub mod kv;
pub mod params;
pub mod rng;
pub mod streamer;
pub mod tensor;
pub mod vae;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use kv::KvMap;
pub use params::{AdamW, AdamWConfig, ParamId, ParamStore};
pub use tensor::Tensor;
