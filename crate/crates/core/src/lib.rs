//! Tools for measuring and mitigating API hallucinations in generated code.
//!
//! The pipeline: generate a first-pass invocation, decide whether to retrieve
//! documentation (index lookup and/or invocation confidence), retrieve with
//! controllable precision, augment the prompt, regenerate, and judge the
//! first call against the target API's stub.

pub mod api_index;
pub mod augmenter;
pub mod bench;
pub mod corpus_miner;
pub mod gateway;
pub mod invocation;
pub mod lexer;
pub mod policy;
pub mod retriever;
