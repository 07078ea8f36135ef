//! Edge-side auditing of service tiering and quota throttling on LEO
//! access links.
//!
//! The pipeline ingests three log streams recorded next to a satellite
//! terminal — 1 Hz terminal telemetry, host-side active probes (pings,
//! periodic speedtests, interface counters), and account-portal plan/quota
//! events — and turns them into:
//!
//! * guard-trimmed, portal-labeled stable segments ([`label`]),
//! * per-window fingerprints combining download goodput with the
//!   internal-to-user throughput ratio ([`features`]),
//! * a threshold rule that separates high-speed from capped operation and
//!   sub-classifies the capped plateaus, plus quota-depletion
//!   enforcement-delay measurement ([`audit`]),
//! * and a seeded token-bucket trace simulator that produces
//!   format-compatible logs with exact ground truth for end-to-end
//!   verification ([`sim`]).
//!
//! [`report`] wires the stages into the file-level bundle the CLI exposes.

pub mod audit;
pub mod features;
pub mod ingest;
pub mod label;
pub mod report;
pub mod sim;
pub mod stats;

pub use stats::{SummaryTriplet, Timestamp};
