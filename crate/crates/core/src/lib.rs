//! chaincalc-core: an operator calculus on Dirac chains.
//!
//! A Dirac k-chain is a finite weighted sum of pointed k-direction elements
//! `(p; alpha)`; higher-order elements `(p; sigma (x) alpha)` carry a
//! symmetric tensor of dipole directions. This crate provides:
//!
//! * exact graded-chain algebra — extrusion, retraction, prederivative,
//!   boundary, perpendicular complement, multiplication by functions,
//!   pushforward, Cartesian wedge ([`chainops`]);
//! * differential-form pairing by iterated directional derivatives
//!   ([`form`]);
//! * certified two-sided estimation of the difference-chain norms `B^r`
//!   ([`norms`]);
//! * chain-representative streams of classical and fractal integration
//!   domains with accelerated, certified integration ([`rep`]);
//! * flows of chains and numerical verification of the transport theorems
//!   ([`flow`]).

pub mod chain;
pub mod chainops;
pub mod error;
pub mod flow;
pub mod form;
pub mod multivec;
pub mod norms;
pub mod rep;

pub use chain::{ChainElement, DiracChain, OpenRegion};
pub use error::{ChainError, Result};
pub use flow::{EvolvingChain, FlowMap, FlowReport, TimeForm};
pub use form::{Form, Poly, ScalarField, SmoothMap, VectorField};
pub use multivec::{KVector, SymTensor, Vecn};
pub use norms::NormEstimate;
pub use rep::{ChainStream, DomainSpec, IntegrateOpts, StreamIntegral};
