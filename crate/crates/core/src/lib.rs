//! Bootstrapping task-oriented dialogue data through LLM self-talk.
//!
//! An agent and a client model converse under a workflow graph, the resulting
//! dialogues are scored with automated metrics, filtered by quality and
//! exported as fine-tuning records.

pub mod annotation;
pub mod evaluation;
pub mod filters;
pub mod llm_gateway;
pub mod pipeline;
pub mod simulation;
pub mod stats;
pub mod textmetrics;
pub mod workflow;
