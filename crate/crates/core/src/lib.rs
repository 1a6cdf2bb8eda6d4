//! Experience feedback network (EFN) at desk scale.
//!
//! A frozen base controller acts in a synthetic token world. An experience
//! bank stores past rollouts with compact int8 keys; at every step the agent
//! retrieves a similar stored step, and a Soft Actor-Critic residual policy
//! nudges the base action so that the next observation resembles what
//! happened next in memory.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`embedding`] | token matrices, mean-max keys, random projection, int8 quantizer |
//! | [`sinkhorn`] | token-level entropic optimal transport similarity |
//! | [`langsim`] | language-conditioned reranking scores and fusion |
//! | [`bank`] | rollout storage, retention and binary persistence |
//! | [`retrieval`] | instruction filtering, efficiency prior, top-k softmax sampling |
//! | [`reward`] | semantic, shaped anti-idling and affine-mapped rewards |
//! | [`sac`] | context encoder, squashed Gaussian actor, twin critics, replay |
//! | [`env`] | point-mass token world and the biased base policy |
//! | [`runner`] | training, evaluation, volume sweeps, config and metrics |

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bank;
pub mod embedding;
pub mod env;
pub mod error;
pub mod langsim;
pub mod retrieval;
pub mod reward;
pub mod runner;
pub mod sac;
pub mod sinkhorn;

pub use bank::{ExperienceBank, Outcome, Retention, Rollout, StepRecord};
pub use embedding::{Key, KeySpace, ProjectionMatrix, QuantizedKey, TokenMatrix};
pub use env::{EpisodeStep, TokenWorld, TokenWorldConfig};
pub use error::{Error, Result};
pub use retrieval::{RetrievalConfig, RetrievedStep};
pub use reward::{RewardBreakdown, RewardWeights, SimilarityMode};
pub use runner::{Metrics, RunConfig};
pub use sac::{SacConfig, SacState};
pub use sinkhorn::{SinkhornConfig, TransportPlan};

/// Default epsilon guard for normalizations.
pub const EPS: f64 = 1e-12;
