//! Interpretable multimodal prototyping over whole-slide histology bags and
//! grouped genomic profiles: prototype construction, cross-modal alignment,
//! adversarial genomics imputation, bipartite fusion, and task heads, with a
//! reverse-mode tape powering both training and gradient checking.

pub mod alignment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod imputation;
pub mod model;
pub mod pipeline;
pub mod prototyping;
pub mod tasks;
