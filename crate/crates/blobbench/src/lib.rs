//! Storage-aging benchmark for large-object stores.
//!
//! Three backends share one blob interface: a real-filesystem store using
//! safe-write file replacement, a simulated extent store with an NTFS-style
//! run cache over a flat volume image, and a simulated page store with
//! out-of-row page chains and a bulk-logged write-ahead log. A seeded
//! workload engine drives them through bulk load and overwrite churn to
//! chosen storage ages, and a marker-based raw-image scanner measures
//! physical fragmentation without consulting any backend metadata.

pub mod error;
pub mod bench;
pub mod config;
pub mod crash;
pub mod extent_store;
pub mod fs_store;
pub mod marker;
pub mod meta;
pub mod page_store;
pub mod report;
pub mod scanner;
pub mod store;
pub mod volume;
pub mod wal;
pub mod workload;

pub use error::{Error, Result};
