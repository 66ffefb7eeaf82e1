//! Desk-scale laboratory for knowledge-injection attacks on LLM agent
//! communities: a tiny editable transformer, rank-one editing, preference
//! optimization with low-rank adapters, a chatroom simulator, retrieval
//! persistence and the evaluation metrics.

pub mod chatroom;
pub mod corpus;
pub mod editor;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod persuade;
pub mod ragstore;
pub mod tinylm;

pub use error::{Error, Result};
