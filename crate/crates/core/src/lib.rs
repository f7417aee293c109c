//! Screening of longitudinal athletics performances.
//!
//! The crate is organised along the data flow of the system:
//!
//! * [`ingest`] parses result, competition and sanction files into validated records.
//! * [`store`] keeps them in an embedded relational database and serves event slices,
//!   materialized detection runs and cached screening pages.
//! * [`detect`] holds the uniform detector contract and the eight detection methods.
//! * [`evaluate`] scores detectors against sanction labels at the athlete level and
//!   assembles consensus lists and screening pages.
//! * [`synth`] generates synthetic datasets with known injected effects, plus an exact
//!   oracle for the rule-based detectors.

pub mod detect;
pub mod evaluate;
pub mod ingest;
pub mod slice;
pub mod store;
pub mod synth;

pub use detect::{
    list_methods, run_detector, AthleteHistory, DetectError, DetectionEntry, DetectionResult,
    DetectorConfig, EntryStatus, MethodId,
};
pub use evaluate::{ConsensusEntry, EvaluationReport, ScreeningPage};
pub use ingest::{Centis, PerformanceRecord, RawResultRow, Round, SanctionRecord};
pub use slice::{EventSlice, Gender};
pub use store::Store;
