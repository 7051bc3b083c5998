//! Probability generating function machinery for PCR branching processes,
//! with the forensic STR data model built on top of it.
//!
//! The crate is organised in layers. [`spectral`] holds the DFT-backed
//! probability-vector arithmetic. [`branching`] defines per-cycle branching
//! systems once, as data, and derives from that single definition the
//! spectral iteration, the scalar unit-circle iteration, the moment
//! recurrences and the Monte Carlo sampler, so the four evaluation routes
//! cannot drift apart. [`amplicon`] and [`genomic`] are the two PCR models;
//! [`contour`] evaluates single probabilities and cumulative masses through
//! truncated unit-circle sums where a full transform would not fit in
//! memory. [`sample`], [`likelihood`], [`estimate`] and [`simulate`] form
//! the electropherogram model: pre-PCR sampling, degradation, drop-in,
//! baseline noise, RFU scaling, peak-height likelihoods under four
//! evaluation backends, maximum-likelihood fitting and forward simulation.
//! [`io`] reads and writes the line-oriented file formats used by the CLI.

pub mod amplicon;
pub mod branching;
pub mod contour;
pub mod estimate;
pub mod genomic;
pub mod io;
pub mod likelihood;
pub mod numeric;
pub mod sample;
pub mod simulate;
pub mod spectral;

pub use spectral::{ProbVec, SpectralVec};
