use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;

use super::{builtin_kernel, check_builtin_model, job_timeout, Backend, JobBoard, Ticket};
use crate::error::{Result, UpmError};
use crate::model::DeviceDescriptor;

/// Runs each job inline on the caller's thread with the sequential kernel.
pub struct EchoBackend {
    descriptor: DeviceDescriptor,
    board: JobBoard,
    job_timeout: Duration,
}

impl EchoBackend {
    pub fn start(descriptor: &DeviceDescriptor) -> Result<EchoBackend> {
        check_builtin_model(descriptor, false)?;
        Ok(EchoBackend { descriptor: descriptor.clone(), board: JobBoard::new(), job_timeout: job_timeout(descriptor)? })
    }
}

impl Backend for EchoBackend {
    fn descriptor(&self) -> &DeviceDescriptor {
        &self.descriptor
    }

    fn board(&self) -> &JobBoard {
        &self.board
    }

    fn submit(&self, kernel: &str, payload: Vec<u8>) -> Result<Ticket> {
        let kernel = builtin_kernel(kernel)?;
        let ticket = self.board.register(Some(self.job_timeout))?;
        self.board.complete(ticket, kernel.run(&payload));
        Ok(ticket)
    }

    fn stop(&self) {
        self.board.close();
    }
}

/// A fixed-size thread pool; each job is sharded across `workers` pieces.
pub struct MulticoreBackend {
    descriptor: DeviceDescriptor,
    board: Arc<JobBoard>,
    pool: rayon::ThreadPool,
    workers: usize,
    job_timeout: Duration,
}

impl MulticoreBackend {
    /// Pool size comes from the `workers` param, defaulting to the number of
    /// available cores.
    pub fn start(descriptor: &DeviceDescriptor) -> Result<MulticoreBackend> {
        check_builtin_model(descriptor, false)?;
        let workers = match descriptor.param_u64("workers")? {
            Some(0) => return Err(UpmError::InvalidManifest("params.workers".into())),
            Some(n) => n as usize,
            None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name({
                let name = descriptor.name.clone();
                move |i| format!("upm-{name}-{i}")
            })
            .build()
            .map_err(|e| UpmError::backend(format!("thread pool: {e}")))?;
        Ok(MulticoreBackend {
            descriptor: descriptor.clone(),
            board: Arc::new(JobBoard::new()),
            pool,
            workers,
            job_timeout: job_timeout(descriptor)?,
        })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

impl Backend for MulticoreBackend {
    fn descriptor(&self) -> &DeviceDescriptor {
        &self.descriptor
    }

    fn board(&self) -> &JobBoard {
        &self.board
    }

    fn submit(&self, kernel: &str, payload: Vec<u8>) -> Result<Ticket> {
        let kernel = builtin_kernel(kernel)?;
        let ticket = self.board.register(Some(self.job_timeout))?;
        let board = self.board.clone();
        let parts = self.workers;
        self.pool.spawn(move || {
            let result = kernel.run_sharded(&payload, parts, |shards| {
                shards.into_par_iter().map(|s| kernel.partial(s)).collect()
            });
            board.complete(ticket, result);
        });
        Ok(ticket)
    }

    fn stop(&self) {
        self.board.close();
    }
}

impl Drop for MulticoreBackend {
    fn drop(&mut self) {
        self.board.close();
    }
}
