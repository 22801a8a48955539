//! Federated averaging with rate-adaptive compressed uplinks.
//!
//! * [`codecs`]: PQ, QSGD and TopK encoders with exact traffic accounting
//! * [`bounds`]: closed-form compression-error bounds and convergence-bound evaluators
//! * [`allocator`]: distributes a bit budget over rounds by learning-rate-weighted error
//! * [`learners`]: logistic regression and an MLP, datasets and client partitioning
//! * [`engine`]: the FedAvg loop with partial participation
//! * [`netsim`]: stochastic uplink throughput and round communication time

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod codecs;
pub mod seeds;
pub mod bounds;
pub mod allocator;
pub mod netsim;
pub mod learners;
pub mod engine;
