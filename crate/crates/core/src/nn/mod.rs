//! Minimal differentiable building blocks: dense and LSTM layers with
//! explicit backward passes, Gaussian latent heads, the negative ELBO, Adam
//! and a finite-difference gradient checker.

pub mod adam;
pub mod grad;
pub mod layers;
pub mod tensor;
pub mod vae;

pub use adam::{adam_step, AdamState};
pub use grad::{grad, grad_check, grad_check_with_floor, Objective};
pub use layers::{dense_forward, lstm_forward, Activation, Dense, Lstm, LstmTrace};
pub use tensor::{Params, Tensor};
pub use vae::{elbo_loss, reparameterize, Elbo, LatentDist};
