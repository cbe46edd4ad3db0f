//! Small convolutional networks with transformation-invariant pooling.
//!
//! A [`Network`] evaluates one shared-weight convolutional trunk on every
//! transformed copy `phi(x)` of an input, keeps the per-feature maximum over
//! the [`TransformSet`], and classifies those invariant features with a
//! fully-connected head. When the transformation set is a group (for example
//! the four exact quarter turns) the network output is exactly invariant to
//! the set.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod data;
pub mod error;
pub mod layers;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod transform;

pub use error::{Error, Result};
pub use layers::{Mode, Param};
pub use network::{LayerSpec, Network, NetworkTopology, Pooling};
pub use optim::{Adadelta, Sgd};
pub use scalar::Scalar;
pub use tensor::{IndexTensor, Tensor};
pub use transform::{RotationRange, Transform, TransformSet};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Adadelta32 = Adadelta<f32>;
pub type Adadelta64 = Adadelta<f64>;
