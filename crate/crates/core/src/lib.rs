//! Inference for pairwise graphical models whose evidence arrives as
//! aggregate marginals rather than per-individual observations.
//!
//! The centerpiece is a scaling belief propagation solver ([`sbp`]) that
//! interleaves Sinkhorn-style rescaling at observed leaves with ordinary
//! sum-product updates along tree paths, so each observation step costs a
//! path refresh instead of a full sweep. Around it:
//!
//! * [`graph`], [`potential`]: model structure and validation;
//! * [`bp`]: plain sum-product on trees and damped loopy propagation;
//! * [`dense`]: exact tensor reference implementations, including
//!   multi-marginal Sinkhorn scaling, for small problems and tests;
//! * [`hmm`]: collective filtering and smoothing over time series;
//! * [`transform`]: directed-to-pairwise conversion and rewriting internal
//!   observations into observed leaves;
//! * [`baselines`]: approximate solvers for noisy aggregate observations
//!   (tilted propagation, averaged-gradient and proximal variants);
//! * [`sim`]: a grid-world population simulator for generating test data;
//! * [`io`]: file formats for models, observations, and run traces.

pub mod baselines;
pub mod bp;
pub mod dense;
pub mod error;
pub mod graph;
pub mod hmm;
pub mod io;
pub mod potential;
pub mod sbp;
pub mod sim;
pub mod transform;

pub use error::{Error, Result};
pub use graph::{validate_tree, Neighbor, TreeCheck, TreeDefect, TreeGraph};
pub use potential::{AggregateMarginal, EdgeMarginal, EdgePotential, MarginalSet, Potentials};
