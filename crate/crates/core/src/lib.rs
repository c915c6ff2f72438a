//! Report-driven feedback and monitoring for deployed imaging algorithms.
//!
//! Sites produce interactive reports whose inline hyperlink anchors tie
//! findings to image regions. This crate turns those reports into localized
//! labels, de-identifies everything before it leaves a site, ingests it at a
//! central hub through an idempotent envelope protocol, scores algorithm
//! output against the labels, watches the agreement streams for drift and
//! keeps a hash-chained audit trail of model versions and deployments.
//!
//! The [`sim`] module wires all of it together into a deterministic
//! multi-site scenario driver.

pub mod canonical;
pub mod clock;
pub mod deid;
pub mod feedback;
pub mod ingest;
pub mod model;
pub mod monitor;
pub mod registry;
pub mod report;
pub mod sim;

pub use canonical::{canonical_digest, from_canonical, sha256_hex, to_canonical, Digest};
pub use model::{
    FindingCode, IdentityBlock, ImageRef, Measurement, MeasurementUnit, Modality, Region,
    StudyRecord, Violation,
};
