//! Dense referring-expression annotation for RGB-D scan corpora.
//!
//! The crate covers the whole offline path: loading scans ([`corpus`]),
//! projecting instance points into frames ([`geomview`]), rendering the staged
//! object views ([`framestage`]), talking to chat backends ([`llmgate`]),
//! running the five-stage annotation job ([`pipeline`]), scoring segmentation
//! predictions ([`evalbench`]) and the human review store ([`reviewsvc`]).

pub mod corpus;
pub mod evalbench;
pub mod framestage;
pub mod geomview;
pub mod llmgate;
pub mod pipeline;
pub mod reviewsvc;
