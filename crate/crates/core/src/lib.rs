//! Image classification with a class-hierarchy distance prior.
//!
//! A hierarchical category tree supplies a pairwise class distance prior,
//! and a quantitative-relativity triplet loss aligns a classifier's latent
//! distances with it. The crate bundles the tensor engine, the tree and
//! latent metrics, the objective, a tiny convolutional backbone with its
//! trainer, weakly-supervised localization scoring and a synthetic dataset
//! generator.

pub mod autodiff;
pub mod rng;
pub mod knowledge;
pub mod latent;
pub mod qtr;
pub mod data;
pub mod synth;
pub mod backbone;
pub mod train;
pub mod wsol;
pub mod experiment;
