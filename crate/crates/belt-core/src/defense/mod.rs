//! Desk-scale reference defenses used to score backdoored models: per-class
//! trigger reverse engineering with a median-absolute-deviation anomaly
//! index, and perturbation-entropy input screening.

pub mod nc;
pub mod strip;

pub use nc::{
    nc_anomaly_index, nc_reverse_trigger, nc_scan, NcConfig, NcVerdict, ReversedTrigger,
};
pub use strip::{
    histogram_overlap, strip_entropy, strip_entropy_over, strip_scan, Percentiles, StripConfig,
    StripVerdict,
};
