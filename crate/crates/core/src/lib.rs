//! User-space reserve-and-prefault memory allocation for latency-critical
//! services.
//!
//! The crate is split into four parts:
//!
//! * [`backend`]: raw memory primitives (region growth, anonymous chunks,
//!   pinning, file-cache advice) with a real OS implementation and a
//!   deterministic simulated one.
//! * [`alloc`]: the allocator front-end. Small requests are served from a
//!   pre-faulted heap arena, large ones from a segregated pool of pre-faulted
//!   chunks, and a periodic management round keeps both topped up.
//! * [`monitor`]: the node-level daemon that tracks latency-critical and
//!   batch processes and drops batch-job file cache largest-file-first when
//!   memory usage crosses a threshold.
//! * [`bench`]: the micro benchmark, pressure generators and latency
//!   reporting.

pub mod alloc;
pub mod backend;
pub mod bench;
pub mod config;
pub mod monitor;
pub use alloc::{AllocError, Allocator, ReservationPolicy};
pub use backend::{Backend, BackendError, BackendStats, ChunkHandle, Region};
