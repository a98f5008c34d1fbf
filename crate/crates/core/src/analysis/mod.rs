//! Diagnostics: activation-memory metering, linear probes, CKA similarity and
//! training-curve export.

pub mod cka;
pub mod memory;
pub mod metrics;
pub mod probe;

pub use cka::{cka_linear, layerwise_cka, CkaReport, LayerValue};
pub use memory::{meter_peak_activations, MemoryReport};
pub use metrics::{EpochRecord, MetricsSeries, CSV_HEADER};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};
