//! Compute devices as files.
//!
//! Accelerators, multicore pools, worker clusters and external plug-ins are
//! installed into a [`Registry`] as devices and driven through a
//! [`DeviceHandle`]: open a `upm://` path, write a job, read its result.

pub mod backends;
pub mod coupler;
pub mod error;
pub mod fileapi;
pub mod framing;
pub mod model;
pub mod reducer;
pub mod registry;
pub mod scheduler;
pub mod serve;

pub use error::{Result, UpmError};
pub use fileapi::{DeviceHandle, Runtime};
pub use framing::{decode_frame, encode_frame, Frame, FrameKind};
pub use model::{DeviceClass, DeviceDescriptor, JobId, Rational, TransportSpec};
pub use registry::Registry;
