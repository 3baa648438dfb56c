//! Core of `kcfguard`: Kubernetes configuration file (KCF) parsing, the unified
//! misconfiguration index, label encoding, the declarative rule engine, dataset
//! construction, completion backends, detection/resolution orchestration and the
//! evaluation harness.
//!
//! The crate is `no_std` and only needs `alloc`. File IO, HTTP, external scanners
//! and the command line live in the `kcfguard` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod dataset;
pub mod eval;
pub mod gateway;
pub mod json;
pub mod kcf;
pub mod label;
pub mod resolve;
pub mod rules;
pub mod seed;
pub mod umi;

pub use dataset::{ContextualExample, LabeledExample, SplitManifest};
pub use eval::{ConfusionTally, EvalReport};
pub use gateway::{CompletionBackend, CompletionRequest, GatewayError};
pub use kcf::{KcfDocument, KcfError, NodeValue, ResourceTree};
pub use label::{DecodedLabel, EncodedLabel, LabelSet};
pub use resolve::{Localization, ResolutionReport};
pub use rules::{DetectionRecord, Rule, RuleSet, Source};
pub use umi::{MisconfigEntry, Umi};
