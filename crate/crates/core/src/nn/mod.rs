//! Tensor engine: convolutions, a shared operation interface with eager and
//! taped backends, layers, and the weight file.

pub mod backend;
pub mod conv;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use backend::{Backend, Infer};
pub use conv::MaskKind;
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub mod layers;
pub mod weights;
