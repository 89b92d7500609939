//! Toy problems, networks, datasets and the training loop.

pub mod data;
pub mod net;
pub mod sgd;
pub mod toy;
pub mod train;
