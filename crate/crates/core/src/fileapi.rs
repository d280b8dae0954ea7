//! Devices as files: open, write, read, control, close.
//!
//! A path has the form `upm://<device-name>[?model=<model_id>]`. Without a
//! query the device's own model runs every job; a query selects the model
//! explicitly and must be the device's model or, for kernel-set devices, a
//! member of the set. Kernel-set devices therefore need the query.
//!
//! Files are record-oriented: one write is one job and one read returns one
//! whole result, oldest job first.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::backends::{self, kernels, Backend, Ticket};
use crate::error::{Result, UpmError};
use crate::model::{is_valid_device_name, DeviceClass, DeviceDescriptor, JobId};
use crate::registry::Registry;

pub const SCHEME: &str = "upm://";

/// A parsed device path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DevicePath {
    pub name: String,
    pub model: Option<String>,
}

pub fn parse_path(path: &str) -> Result<DevicePath> {
    let bad = || UpmError::protocol("path");
    let rest = path.strip_prefix(SCHEME).ok_or_else(bad)?;
    let (name, query) = match rest.split_once('?') {
        Some((name, query)) => (name, Some(query)),
        None => (rest, None),
    };
    if !is_valid_device_name(name) {
        return Err(bad());
    }
    let model = match query {
        None => None,
        Some(q) => match q.strip_prefix("model=") {
            Some(m) if !m.is_empty() && !m.contains(['&', '=', '?']) => Some(m.to_string()),
            _ => return Err(bad()),
        },
    };
    Ok(DevicePath { name: name.to_string(), model })
}

/// The model a handle's jobs run under.
fn select_model(d: &DeviceDescriptor, requested: Option<&str>) -> Result<String> {
    let set = match d.class {
        DeviceClass::External => None,
        _ => kernels::kernel_set_members(&d.model_id),
    };
    match (requested, set) {
        (None, Some(_)) => Err(UpmError::IncompatibleModel(format!("{} is a kernel set; add ?model=", d.model_id))),
        (None, None) => Ok(d.model_id.clone()),
        (Some(m), _) if m == d.model_id && set.is_none() => Ok(m.to_string()),
        (Some(m), Some(members)) if members.iter().any(|k| k.name() == m) => Ok(m.to_string()),
        (Some(m), _) => Err(UpmError::IncompatibleModel(m.to_string())),
    }
}

struct Instance {
    backend: Arc<dyn Backend>,
    leases: usize,
}

struct Inner {
    registry: Arc<Registry>,
    instances: Mutex<HashMap<String, Instance>>,
}

/// Opens devices from a registry and shares one backend instance per
/// device among all handles open on it.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<Inner>,
}

impl Runtime {
    pub fn new(registry: Arc<Registry>) -> Runtime {
        Runtime { inner: Arc::new(Inner { registry, instances: Mutex::new(HashMap::new()) }) }
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn open(&self, path: &str) -> Result<DeviceHandle> {
        let path = parse_path(path)?;
        let device = self.inner.registry.lookup(&path.name)?;
        let model = select_model(&device, path.model.as_deref())?;
        let backend = {
            let mut instances = self.inner.instances.lock().unwrap_or_else(|p| p.into_inner());
            match instances.get_mut(&device.name) {
                Some(inst) if inst.backend.is_alive() && inst.backend.descriptor() == &device => {
                    inst.leases += 1;
                    inst.backend.clone()
                }
                _ => {
                    let backend = backends::start(&device)?;
                    if let Some(old) = instances.insert(device.name.clone(), Instance { backend: backend.clone(), leases: 1 }) {
                        log::info!("replacing instance of {}", device.name);
                        old.backend.stop();
                    }
                    backend
                }
            }
        };
        Ok(DeviceHandle {
            runtime: self.inner.clone(),
            device,
            model,
            backend,
            open: true,
            next_job: JobId::FIRST,
            pending: VecDeque::new(),
            submitted: 0,
        })
    }

    /// Names of devices with a running instance.
    pub fn running(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.inner.instances.lock().unwrap_or_else(|p| p.into_inner()).keys().cloned().collect();
        names.sort();
        names
    }
}

impl Inner {
    fn release(&self, name: &str, backend: &Arc<dyn Backend>) {
        let mut instances = self.instances.lock().unwrap_or_else(|p| p.into_inner());
        let last = match instances.get_mut(name) {
            Some(inst) if Arc::ptr_eq(&inst.backend, backend) => {
                inst.leases -= 1;
                inst.leases == 0
            }
            // Already replaced after a failure; the old instance is ours alone.
            _ => {
                backend.stop();
                return;
            }
        };
        if last {
            if let Some(inst) = instances.remove(name) {
                drop(instances);
                inst.backend.stop();
            }
        }
    }
}

/// An open device file.
pub struct DeviceHandle {
    runtime: Arc<Inner>,
    device: DeviceDescriptor,
    model: String,
    backend: Arc<dyn Backend>,
    open: bool,
    next_job: JobId,
    pending: VecDeque<(JobId, Ticket)>,
    submitted: u64,
}

impl std::fmt::Debug for DeviceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceHandle")
            .field("device", &self.device.name)
            .field("model", &self.model)
            .field("open", &self.open)
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl DeviceHandle {
    pub fn device(&self) -> &DeviceDescriptor {
        &self.device
    }

    /// The model jobs on this handle run under.
    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Operating-system processes behind the device, if any.
    pub fn processes(&self) -> Vec<u32> {
        self.backend.processes()
    }

    fn check_open(&self) -> Result<()> {
        if self.open {
            Ok(())
        } else {
            Err(UpmError::DeviceClosed)
        }
    }

    /// A failed backend closes every handle on it.
    fn close_if_dead(&mut self) {
        if !self.backend.is_alive() {
            self.close();
        }
    }

    /// Submits one job.
    pub fn write(&mut self, payload: &[u8]) -> Result<JobId> {
        self.check_open()?;
        match self.backend.submit(&self.model, payload.to_vec()) {
            Ok(ticket) => {
                let id = self.next_job;
                self.next_job = id.next();
                self.pending.push_back((id, ticket));
                self.submitted += 1;
                Ok(id)
            }
            Err(e) => {
                self.close_if_dead();
                Err(e)
            }
        }
    }

    /// Returns the result of the oldest unread job. `None` waits forever.
    ///
    /// On `TIMEOUT` from the reader's own deadline the job stays pending.
    /// A failed job is consumed.
    pub fn read(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>> {
        self.read_with_id(timeout).map(|(_, bytes)| bytes)
    }

    /// Like [`read`](Self::read), also returning the job id.
    pub fn read_with_id(&mut self, timeout: Option<Duration>) -> Result<(JobId, Vec<u8>)> {
        self.check_open()?;
        let Some(&(id, ticket)) = self.pending.front() else {
            return Err(UpmError::Timeout);
        };
        match self.backend.collect(ticket, timeout) {
            Ok(bytes) => {
                self.pending.pop_front();
                Ok((id, bytes))
            }
            Err(UpmError::Timeout) if self.backend.board().contains(ticket) => Err(UpmError::Timeout),
            Err(e) => {
                self.pending.pop_front();
                self.close_if_dead();
                Err(e)
            }
        }
    }

    /// Non-blocking: the oldest job's outcome if it has finished.
    pub fn poll(&mut self) -> Option<(JobId, Result<Vec<u8>>)> {
        if !self.open {
            return None;
        }
        let &(id, ticket) = self.pending.front()?;
        if !self.backend.is_ready(ticket) {
            return None;
        }
        Some((id, self.read(Some(Duration::ZERO))))
    }

    /// `flush` waits for every pending job without consuming results;
    /// `stat` reports `pending=<n> submitted=<m>`.
    pub fn control(&mut self, cmd: &str) -> Result<String> {
        self.check_open()?;
        match cmd {
            "flush" => {
                for &(_, ticket) in &self.pending {
                    // Failures stay in place for read to report.
                    let _ = self.backend.wait(ticket, None);
                }
                Ok("ok".into())
            }
            "stat" => Ok(format!("pending={} submitted={}", self.pending.len(), self.submitted)),
            other => Err(UpmError::protocol(format!("control {other:?}"))),
        }
    }

    /// Discards unread results and releases the device. Idempotent.
    pub fn close(&mut self) {
        if !std::mem::replace(&mut self.open, false) {
            return;
        }
        for (_, ticket) in self.pending.drain(..) {
            self.backend.board().discard(ticket);
        }
        self.runtime.release(&self.device.name, &self.backend);
    }
}

impl Drop for DeviceHandle {
    fn drop(&mut self) {
        self.close();
    }
}
