//! Sparse dynamic network reconstruction.
//!
//! `dsfnet` identifies an innovations-form state-space model from input/output
//! time series and reads off the network it implies through its dynamical
//! structure function `(Q, P, H)`. Identification alternates Kalman smoothing
//! (E-step) with a sparse-Bayesian-learning M-step whose hyperparameters are
//! themselves fitted by an inner EM loop. Identifiability masks keep the
//! estimated `P` diagonal.
//!
//! Module map:
//!
//! * [`model`]: the state-space model class, random sparse ground truths and
//!   input/output simulation.
//! * [`dsf`]: structure functions (sampled and exact rational), Boolean
//!   network extraction and graph metrics.
//! * [`smoother`]: Kalman filter, RTS smoother, lag-one covariance smoother and
//!   the expected complete-data log-likelihood.
//! * [`sbl`]: sparse Bayesian learning with identifiability masks.
//! * [`reconstruct`]: the outer EM loop.
//! * [`bench`]: randomized precision/TPR benchmark harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod dsf;
mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod reconstruct;
pub mod sbl;
pub mod smoother;
pub mod subspace;

pub use error::{Error, Result};

pub use bench::{run_benchmark, BenchConfig, BenchTable};
pub use dsf::{
    boolean_structure, dsf_from_state_space, exact_dsf_small, graph_compare, FreqSample,
    GraphMetrics, NetworkGraph,
};
pub use model::{generate_random_network, simulate, Dataset, GroundTruth, StateSpaceModel};
pub use reconstruct::{reconstruct, ReconConfig, ReconResult};
pub use sbl::{identifiability_mask, sbl_em, Mask, MaskMode, SblOptions, SblState};
pub use smoother::{kalman_filter, observed_loglik, rts_smoother, FilterPass, SmoothPass};
