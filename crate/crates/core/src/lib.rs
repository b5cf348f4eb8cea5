//! Caption dataset augmentation toolkit.
//!
//! The pipeline rewrites image-text corpora through iterative recaption
//! rounds, synthesizes spatial-relation QA from 3D scenes, filters grounded
//! caption corpora, merges specialist annotations, and scores caption quality
//! with a pairwise LLM judge. No model training happens here; inference is
//! reached over a chat-completions wire protocol (or a scripted stub).

pub mod config;
pub mod corpus;
pub mod grounding;
pub mod judge;
pub mod prompts;
pub mod recaption;
pub mod rounds;
pub mod seeded;
pub mod spatialqa;

pub use config::PipelineConfig;
