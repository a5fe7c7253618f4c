//! Core library for evaluating tool-augmented agent trajectories.
//!
//! The unit of evaluation is a [`trajectory::Trajectory`]: the ordered record
//! of an agent's thoughts, tool calls, and observations, ending in a final
//! answer. Tool outputs accumulate in an [`evidence::EvidenceBank`], which an
//! LLM judge (or a deterministic scripted stand-in) consults to decide
//! whether each thought is grounded, which evidence was actually needed for
//! the final answer, and whether the agent recovered from tool failures.
//!
//! On top of that sit pure scoring functions ([`metrics`]), a meta-evaluation
//! harness that scores the judge itself against labeled data ([`meta_eval`]),
//! a labeled-dataset augmentation pipeline ([`augment`]), and a ReAct episode
//! runner with mock tools and controlled failures ([`harness`]).

pub mod augment;
pub mod client;
pub mod embedding;
pub mod evidence;
pub mod failure;
pub mod harness;
pub mod judge;
pub mod meta_eval;
pub mod metrics;
pub mod report;
pub mod trajectory;
pub mod worker;
