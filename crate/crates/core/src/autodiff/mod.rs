//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation executed through it. Calling
//! [`Tape::backward`] on a scalar result replays the record in reverse and
//! returns [`Gradients`] for every tensor that was registered with
//! `requires_grad`. A tape is single-use: after `backward` it refuses further
//! work, and a new forward pass needs a fresh tape.
//!
//! The operation set is deliberately small: exactly what the convolutional
//! autoencoder, the neighbourhood-pooled cosine objective and the downstream
//! heads need. Everything is generic over [`Real`] so the same code runs in
//! 32-bit for training and 64-bit for [`grad_check`].

mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_frozen_routing, grad_check_with, GradCheckReport};
pub use kernels::BatchStats;
pub use real::Real;
pub use tape::{Gradients, Routing, Tape, Var};
pub use tensor::Tensor;
