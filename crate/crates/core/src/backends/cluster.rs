//! The cluster-of-CPU printer: `ranks` worker processes joined by MiniMP.
//!
//! The host never talks to ranks other than 0. Rank 0 receives each job,
//! scatters contiguous shards to ranks `1..n`, computes its own shard,
//! gathers the partials in rank order and combines them. Devices whose
//! model is `coupled-app` additionally host an application script on rank 0.

use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::kernels::{self, Kernel, Model, COUPLED_APP};
use super::minimp::{Endpoint, Router, RouterEvent};
use super::{check_builtin_model, job_timeout, param_duration, resolve_program, Backend, JobBoard, Ticket};
use crate::coupler::app::AppHost;
use crate::error::{Result, UpmError};
use crate::framing::{Frame, FrameKind};
use crate::model::{DeviceDescriptor, TransportSpec};

/// Rank 0 to rank r: kernel name and shard.
pub const TAG_WORK: u64 = 1;
/// Rank r to rank 0: encoded partial result.
pub const TAG_PARTIAL: u64 = 2;

const STOP_GRACE: Duration = Duration::from_secs(2);

pub struct ClusterBackend {
    descriptor: DeviceDescriptor,
    board: Arc<JobBoard>,
    router: Router,
    children: Mutex<Vec<Child>>,
    job_timeout: Duration,
    stopped: AtomicBool,
}

fn next_token(name: &str) -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.subsec_nanos()).unwrap_or(0);
    format!("{name}-{}-{}-{nanos:08x}", std::process::id(), COUNTER.fetch_add(1, Ordering::Relaxed))
}

fn reap(children: &mut [Child], grace: Duration) {
    let deadline = Instant::now() + grace;
    for child in children.iter_mut() {
        loop {
            match child.try_wait() {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
                Ok(None) => thread::sleep(Duration::from_millis(5)),
            }
        }
    }
}

impl ClusterBackend {
    /// Spawns the ranks, waits for them to connect and starts routing.
    pub fn start(descriptor: &DeviceDescriptor) -> Result<ClusterBackend> {
        check_builtin_model(descriptor, true)?;
        let TransportSpec::Spawn(spawn) = &descriptor.transport else {
            return Err(UpmError::InvalidManifest("transport/class".into()));
        };
        let size = spawn.ranks.unwrap_or(1);
        let (program, args) = spawn
            .command
            .split_first()
            .ok_or_else(|| UpmError::InvalidManifest("command".into()))?;
        let startup = param_duration(descriptor, "startup_timeout_ms", super::DEFAULT_STARTUP_TIMEOUT)?;
        let listener = Router::listen()?;
        let addr = listener.local_addr().map_err(|e| UpmError::backend(format!("listen: {e}")))?.to_string();
        let token = next_token(&descriptor.name);

        let mut children = Vec::with_capacity(size as usize);
        for rank in 0..size {
            let spawned = Command::new(resolve_program(program))
                .args(args)
                .args(["--connect", &addr, "--rank", &rank.to_string(), "--size", &size.to_string(), "--token", &token])
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::inherit())
                .spawn();
            match spawned {
                Ok(child) => children.push(child),
                Err(e) => {
                    reap(&mut children, Duration::ZERO);
                    return Err(UpmError::backend(format!("spawn {program}: {e}")));
                }
            }
        }

        let (events_tx, events_rx) = mpsc::channel();
        let router = match Router::accept(&listener, size, &token, startup, events_tx) {
            Ok(r) => r,
            Err(e) => {
                reap(&mut children, Duration::ZERO);
                return Err(match e {
                    UpmError::Timeout => UpmError::backend("ranks did not connect"),
                    other => other,
                });
            }
        };

        let board = Arc::new(JobBoard::new());
        let events_board = board.clone();
        thread::Builder::new()
            .name(format!("upm-{}-events", descriptor.name))
            .spawn(move || {
                for event in events_rx {
                    match event {
                        RouterEvent::FromRoot(f) => {
                            let result = match f.kind {
                                FrameKind::Response => Ok(f.payload),
                                _ => {
                                    let text = String::from_utf8_lossy(&f.payload);
                                    Err(UpmError::from_wire(&text).unwrap_or_else(|| UpmError::backend(text)))
                                }
                            };
                            events_board.complete(Ticket(f.job_id), result);
                        }
                        RouterEvent::RankLost { rank, reason } => {
                            events_board.fail_all(UpmError::backend(format!("rank {rank}: {reason}")));
                        }
                    }
                }
            })
            .map_err(|e| UpmError::backend(format!("thread: {e}")))?;

        Ok(ClusterBackend {
            descriptor: descriptor.clone(),
            board,
            router,
            children: Mutex::new(children),
            job_timeout: job_timeout(descriptor)?,
            stopped: AtomicBool::new(false),
        })
    }

    pub fn ranks(&self) -> u32 {
        self.router.size()
    }

    /// The token ranks of this instance present to its router.
    pub fn token(&self) -> &str {
        self.router.token()
    }

    /// Process ids of the ranks, in rank order.
    pub fn worker_pids(&self) -> Vec<u32> {
        self.children.lock().unwrap_or_else(|p| p.into_inner()).iter().map(Child::id).collect()
    }

    /// Kills one rank process. Used to exercise failure handling.
    pub fn kill_rank(&self, rank: u32) -> Result<()> {
        let mut children = self.children.lock().unwrap_or_else(|p| p.into_inner());
        let child = children.get_mut(rank as usize).ok_or_else(|| UpmError::backend(format!("no rank {rank}")))?;
        child.kill().map_err(|e| UpmError::backend(format!("kill rank {rank}: {e}")))?;
        let _ = child.wait();
        Ok(())
    }
}

impl Backend for ClusterBackend {
    fn descriptor(&self) -> &DeviceDescriptor {
        &self.descriptor
    }

    fn board(&self) -> &JobBoard {
        &self.board
    }

    fn submit(&self, kernel: &str, payload: Vec<u8>) -> Result<Ticket> {
        let coupled = matches!(kernels::resolve_model(&self.descriptor.model_id), Some(Model::CoupledApp));
        let allowed = if kernel == COUPLED_APP { coupled } else { Kernel::from_name(kernel).is_some() };
        if !allowed {
            return Err(UpmError::backend("model"));
        }
        let ticket = self.board.register(Some(self.job_timeout))?;
        if let Err(e) = self.router.send_to_root(&Frame::new(FrameKind::Request, ticket.0, kernel, payload)) {
            self.board.complete(ticket, Err(e));
        }
        Ok(ticket)
    }

    fn processes(&self) -> Vec<u32> {
        self.worker_pids()
    }

    fn stop(&self) {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.board.close();
        self.router.shutdown();
        reap(&mut self.children.lock().unwrap_or_else(|p| p.into_inner()), STOP_GRACE);
    }
}

impl Drop for ClusterBackend {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Runs one job on a fresh cluster instance.
pub fn cluster_run(descriptor: &DeviceDescriptor, model_id: &str, payload: &[u8]) -> Result<Vec<u8>> {
    if descriptor.class != crate::model::DeviceClass::Cluster {
        return Err(UpmError::InvalidManifest("transport/class".into()));
    }
    let backend = ClusterBackend::start(descriptor)?;
    let ticket = backend.submit(model_id, payload.to_vec())?;
    let result = backend.collect(ticket, None);
    backend.stop();
    result
}

fn encode_work(kernel: Kernel, shard: &[u8]) -> Vec<u8> {
    let name = kernel.name().as_bytes();
    let mut out = Vec::with_capacity(1 + name.len() + shard.len());
    out.push(name.len() as u8);
    out.extend_from_slice(name);
    out.extend_from_slice(shard);
    out
}

fn decode_work(msg: &[u8]) -> Result<(Kernel, &[u8])> {
    let bad = || UpmError::protocol("work message");
    let len = *msg.first().ok_or_else(bad)? as usize;
    let name = msg.get(1..1 + len).ok_or_else(bad)?;
    let kernel = std::str::from_utf8(name).ok().and_then(Kernel::from_name).ok_or_else(bad)?;
    Ok((kernel, &msg[1 + len..]))
}

fn encode_partial(result: &Result<Vec<u8>>) -> Vec<u8> {
    match result {
        Ok(bytes) => [&[0u8][..], bytes].concat(),
        Err(e) => [&[1u8][..], e.to_string().as_bytes()].concat(),
    }
}

fn decode_partial(msg: Vec<u8>) -> Result<Vec<u8>> {
    match msg.split_first() {
        Some((0, bytes)) => Ok(bytes.to_vec()),
        Some((1, text)) => {
            let text = String::from_utf8_lossy(text);
            Err(UpmError::from_wire(&text).unwrap_or_else(|| UpmError::backend(text)))
        }
        _ => Err(UpmError::protocol("partial message")),
    }
}

/// Rank 0's side of one SPMD job.
fn spmd_root(ep: &Endpoint, kernel_name: &str, payload: &[u8]) -> Result<Vec<u8>> {
    let kernel = Kernel::from_name(kernel_name).ok_or_else(|| UpmError::backend("model"))?;
    kernel.run_sharded(payload, ep.size() as usize, |shards| {
        let mut sent = vec![true; shards.len()];
        for (rank, shard) in shards.iter().enumerate().skip(1) {
            sent[rank] = ep.send(rank as u32, TAG_WORK, &encode_work(kernel, shard)).is_ok();
        }
        let mut partials = Vec::with_capacity(shards.len());
        partials.push(kernel.partial(shards[0]));
        // Every rank that was sent work is drained, even after an error,
        // so the next job does not read a stale partial.
        for (rank, ok) in sent.iter().enumerate().skip(1) {
            partials.push(if *ok {
                ep.recv(rank as u32, TAG_PARTIAL).and_then(decode_partial)
            } else {
                Err(UpmError::backend(format!("rank {rank}: send failed")))
            });
        }
        partials
    })
}

/// Entry point of a rank process.
pub fn worker_main(addr: &str, rank: u32, size: u32, token: &str) -> Result<()> {
    let ep = Endpoint::connect(addr, rank, size, token)?;
    // The only way out of these loops is the router going away, which is
    // how the host stops a cluster.
    if ep.barrier().is_err() {
        return Ok(());
    }
    if rank == 0 {
        let mut app = AppHost::default();
        while let Some(req) = ep.next_request() {
            let result = if req.device_id == COUPLED_APP {
                app.handle(&req.payload, &mut |kernel, data| spmd_root(&ep, kernel, data))
            } else {
                spmd_root(&ep, &req.device_id, &req.payload)
            };
            let reply = match result {
                Ok(bytes) => Frame::new(FrameKind::Response, req.job_id, "", bytes),
                Err(e) => Frame::error(req.job_id, &e),
            };
            if ep.reply(&reply).is_err() {
                break;
            }
        }
    } else {
        while let Ok(msg) = ep.recv(0, TAG_WORK) {
            let result = decode_work(&msg).and_then(|(kernel, shard)| kernel.partial(shard));
            if ep.send(0, TAG_PARTIAL, &encode_partial(&result)).is_err() {
                break;
            }
        }
    }
    Ok(())
}
