//! Ground-truth testbed: an analytic 2-D Gaussian mixture target and a small
//! trainable noise-prediction MLP.

mod mixture;
mod net;
mod train;

pub use mixture::{AnalyticEpsilon, GaussianMixture, MixtureSpec};
pub use net::{run_layers, Activation, Dense, NetEpsilon, NoisePredictorNet, TimeEmbedding};
pub use train::{
    batch_loss, draw_examples, loss_and_gradient, oracle_discrepancy, train_dsm, Example, TrainConfig, Trained,
};
