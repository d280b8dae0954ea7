//! The executable general printers.
//!
//! Every device class sits behind [`Backend`]: submit a payload, get a
//! [`Ticket`], collect the result later. Results may complete in any order;
//! the file API restores submission order per handle.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Result, UpmError};
use crate::model::{DeviceClass, DeviceDescriptor};

mod board;
pub mod cluster;
pub mod external;
mod inproc;
pub mod kernels;
pub mod minimp;

pub use board::{JobBoard, Ticket};
pub use cluster::{cluster_run, worker_main, ClusterBackend};
pub use external::{external_attach, ExternalBackend};
pub use inproc::{EchoBackend, MulticoreBackend};
pub use kernels::{Kernel, Model};

/// Default bound on a single job, overridable with the `job_timeout_ms` param.
pub const DEFAULT_JOB_TIMEOUT: Duration = Duration::from_secs(60);
/// Default plug-in HELLO wait, overridable with `handshake_timeout_ms`.
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
/// Default wait for cluster ranks to connect, overridable with `startup_timeout_ms`.
pub const DEFAULT_STARTUP_TIMEOUT: Duration = Duration::from_secs(10);

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &DeviceDescriptor;

    fn board(&self) -> &JobBoard;

    /// Submits one job running `kernel` (a kernel name, or the device's own
    /// model id) on `payload`.
    fn submit(&self, kernel: &str, payload: Vec<u8>) -> Result<Ticket>;

    /// Releases the instance. Later submits fail with `DEVICE_CLOSED`.
    fn stop(&self);

    /// Blocks until the job finishes and returns its result exactly once.
    fn collect(&self, ticket: Ticket, timeout: Option<Duration>) -> Result<Vec<u8>> {
        self.board().take(ticket, timeout)
    }

    /// Blocks until the job finishes, leaving the result in place.
    fn wait(&self, ticket: Ticket, timeout: Option<Duration>) -> Result<()> {
        self.board().wait(ticket, timeout)
    }

    fn is_ready(&self, ticket: Ticket) -> bool {
        self.board().is_done(ticket)
    }

    /// Operating-system processes backing the instance, if any.
    fn processes(&self) -> Vec<u32> {
        Vec::new()
    }

    /// False once the instance has failed (a worker or plug-in died).
    fn is_alive(&self) -> bool {
        self.board().failure().is_none()
    }
}

/// Starts (or attaches to) the backend instance for a descriptor.
pub fn start(descriptor: &DeviceDescriptor) -> Result<Arc<dyn Backend>> {
    Ok(match descriptor.class {
        DeviceClass::Echo => Arc::new(EchoBackend::start(descriptor)?),
        DeviceClass::Multicore => Arc::new(MulticoreBackend::start(descriptor)?),
        DeviceClass::Cluster => Arc::new(ClusterBackend::start(descriptor)?),
        DeviceClass::External => Arc::new(external_attach(descriptor)?),
    })
}

pub(crate) fn param_duration(d: &DeviceDescriptor, key: &str, default: Duration) -> Result<Duration> {
    Ok(d.param_u64(key)?.map(Duration::from_millis).unwrap_or(default))
}

pub(crate) fn job_timeout(d: &DeviceDescriptor) -> Result<Duration> {
    param_duration(d, "job_timeout_ms", DEFAULT_JOB_TIMEOUT)
}

/// Resolves a kernel name for in-process execution.
pub(crate) fn builtin_kernel(name: &str) -> Result<Kernel> {
    Kernel::from_name(name).ok_or_else(|| UpmError::backend("model"))
}

/// The descriptor's model must be something the built-in executors can run.
pub(crate) fn check_builtin_model(d: &DeviceDescriptor, allow_coupled: bool) -> Result<()> {
    match kernels::resolve_model(&d.model_id) {
        Some(Model::Kernel(_)) | Some(Model::KernelSet(_)) => Ok(()),
        Some(Model::CoupledApp) if allow_coupled => Ok(()),
        _ => Err(UpmError::backend("model")),
    }
}

/// Locates a helper executable named without a path: next to the current
/// executable (or one directory up, for test harnesses), else via `PATH`.
pub fn resolve_program(name: &str) -> PathBuf {
    if name.contains(std::path::MAIN_SEPARATOR) || name.contains('/') {
        return PathBuf::from(name);
    }
    let file = match std::env::consts::EXE_SUFFIX {
        "" => name.to_string(),
        suffix => format!("{name}{suffix}"),
    };
    if let Ok(exe) = std::env::current_exe() {
        for dir in exe.ancestors().skip(1).take(2) {
            let candidate = dir.join(&file);
            if candidate.is_file() {
                return candidate;
            }
        }
    }
    PathBuf::from(name)
}
