//! Rotation-equivariant local features.
//!
//! Cyclic-group steerable convolutions, the group-pooled descriptor network
//! built on them, descriptor matching with RANSAC verification, toy-scale
//! self-supervised training and the rotated-pair / place-recognition
//! evaluation protocols.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod group;
pub mod io;
pub mod matching;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
