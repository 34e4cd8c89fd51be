//! The filter: analytic Gaussian recursion driven by a learned inverse
//! observation operator, its emission model, the training objectives and
//! both training strategies.

pub mod batched;
pub mod elbo;
mod error;
pub mod koopman;
pub mod model;
pub mod recursion;
pub mod train;
pub mod vonmises;

pub use elbo::{elbo_joint, elbo_linear, BouncePatchObs, Elbo, LinearGaussianObs, Minibatch, ObservationModel};
pub use error::{DbfError, Result};
pub use koopman::{koopman_pretrain, KoopmanOptions, KoopmanResult};
pub use model::{DbfConfig, DbfModel, DynamicsSpec, EmissionFamily, EmissionSpec};
pub use recursion::{dbf_filter, dbf_predict, dbf_update, initial_belief, linear_ioo, FilterOutput, IooOutput, Transition, VirtualPrior};
pub use train::{train_joint, train_linear, DataSource, GeneratedSource, TrainOptions, TrainReport};
pub use vonmises::{log_i0, sample_vonmises, vonmises_logpdf};
