//! MiniMP: the message-passing layer inside cluster devices.
//!
//! Ranks are separate endpoints that each hold one TCP connection to the
//! cluster's [`Router`]. The router forwards point-to-point messages, runs
//! barriers, and is the only path between the owning process (the host) and
//! rank 0. Messages between a fixed `(src, dst, tag)` arrive in send order.
//!
//! Everything on these connections is a [`Frame`]:
//!
//! | purpose          | kind     | job_id | device_id | payload                      |
//! |------------------|----------|--------|-----------|------------------------------|
//! | rank hello       | HELLO    | rank   | token     | size (u32 LE)                |
//! | point-to-point   | CONTROL  | tag    | `mp`      | src u32, dst u32, bytes      |
//! | barrier enter    | CONTROL  | epoch  | `barrier` | empty                        |
//! | barrier release  | CONTROL  | epoch  | `release` | empty                        |
//! | host job         | REQUEST  | ticket | kernel    | job payload                  |
//! | job result       | RESPONSE / ERROR | ticket | | result / error text          |
//! | shutdown         | BYE      | 0      |           |                              |

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Result, UpmError};
use crate::framing::{read_frame, write_frame, Frame, FrameKind};

const MP: &str = "mp";
const BARRIER_ENTER: &str = "barrier";
const BARRIER_RELEASE: &str = "release";

/// One accepted (or refused) rank connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionRecord {
    /// Token of the router that accepted the connection.
    pub router: String,
    /// Token the connecting rank presented.
    pub claimed: String,
    pub rank: u32,
    pub peer: SocketAddr,
    pub accepted: bool,
}

impl ConnectionRecord {
    /// True when a rank connected to a router of another cluster.
    pub fn is_cross_cluster(&self) -> bool {
        self.router != self.claimed
    }
}

static CONNECTION_LOG: Mutex<Vec<ConnectionRecord>> = Mutex::new(Vec::new());

/// Every rank connection made in this process so far.
pub fn connection_log() -> Vec<ConnectionRecord> {
    CONNECTION_LOG.lock().unwrap_or_else(|p| p.into_inner()).clone()
}

fn log_connection(record: ConnectionRecord) {
    CONNECTION_LOG.lock().unwrap_or_else(|p| p.into_inner()).push(record);
}

fn io_err(e: io::Error) -> UpmError {
    UpmError::backend(format!("minimp io: {e}"))
}

fn mp_frame(src: u32, dst: u32, tag: u64, data: &[u8]) -> Frame {
    let mut payload = Vec::with_capacity(8 + data.len());
    payload.extend_from_slice(&src.to_le_bytes());
    payload.extend_from_slice(&dst.to_le_bytes());
    payload.extend_from_slice(data);
    Frame::new(FrameKind::Control, tag, MP, payload)
}

fn mp_header(f: &Frame) -> Option<(u32, u32)> {
    if f.payload.len() < 8 {
        return None;
    }
    let src = u32::from_le_bytes(f.payload[0..4].try_into().unwrap());
    let dst = u32::from_le_bytes(f.payload[4..8].try_into().unwrap());
    Some((src, dst))
}

/// What the router reports to its host.
#[derive(Debug)]
pub enum RouterEvent {
    /// A RESPONSE or ERROR frame sent by rank 0.
    FromRoot(Frame),
    RankLost { rank: u32, reason: String },
}

type Link = Arc<Mutex<TcpStream>>;

struct BarrierState {
    entered: Vec<bool>,
    count: usize,
    epoch: u64,
}

/// Host-side hub of one cluster.
pub struct Router {
    token: String,
    links: Arc<Vec<Link>>,
    stopping: Arc<AtomicBool>,
}

impl Router {
    /// Binds a loopback listener for ranks to connect to.
    pub fn listen() -> Result<TcpListener> {
        TcpListener::bind("127.0.0.1:0").map_err(io_err)
    }

    /// Waits for ranks `0..size` to connect and introduce themselves with
    /// `token`, then starts routing. Connections presenting another token
    /// are logged and dropped.
    pub fn accept(
        listener: &TcpListener,
        size: u32,
        token: &str,
        timeout: Duration,
        events: Sender<RouterEvent>,
    ) -> Result<Router> {
        let deadline = Instant::now() + timeout;
        let mut slots: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        let mut joined = 0;
        listener.set_nonblocking(true).map_err(io_err)?;
        while joined < size {
            let (stream, peer) = match listener.accept() {
                Ok(conn) => conn,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(UpmError::Timeout);
                    }
                    thread::sleep(Duration::from_millis(2));
                    continue;
                }
                Err(e) => return Err(io_err(e)),
            };
            stream.set_nonblocking(false).map_err(io_err)?;
            stream.set_nodelay(true).map_err(io_err)?;
            stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1)))).map_err(io_err)?;
            let hello = match read_frame(&mut &stream) {
                Ok(Some(f)) if f.kind == FrameKind::Hello => f,
                Ok(_) => continue,
                Err(_) => continue,
            };
            stream.set_read_timeout(None).map_err(io_err)?;
            let rank = hello.job_id as u32;
            let accepted = hello.device_id == token && (rank as usize) < slots.len() && slots[rank as usize].is_none();
            log_connection(ConnectionRecord {
                router: token.to_string(),
                claimed: hello.device_id.clone(),
                rank,
                peer,
                accepted,
            });
            if accepted {
                slots[rank as usize] = Some(stream);
                joined += 1;
            } else {
                log::warn!("router {token}: refused rank {rank} presenting {:?}", hello.device_id);
            }
        }
        let streams: Vec<TcpStream> = slots.into_iter().map(|s| s.expect("all ranks joined")).collect();
        let links: Arc<Vec<Link>> = Arc::new(
            streams
                .iter()
                .map(|s| s.try_clone().map(|c| Arc::new(Mutex::new(c))))
                .collect::<io::Result<_>>()
                .map_err(io_err)?,
        );
        let stopping = Arc::new(AtomicBool::new(false));
        let barrier = Arc::new(Mutex::new(BarrierState { entered: vec![false; size as usize], count: 0, epoch: 0 }));
        for (rank, stream) in streams.into_iter().enumerate() {
            let links = links.clone();
            let barrier = barrier.clone();
            let events = events.clone();
            let stopping = stopping.clone();
            thread::Builder::new()
                .name(format!("upm-router-{rank}"))
                .spawn(move || route_rank(rank as u32, stream, links, barrier, events, stopping))
                .map_err(io_err)?;
        }
        Ok(Router { token: token.to_string(), links, stopping })
    }

    pub fn token(&self) -> &str {
        &self.token
    }

    pub fn size(&self) -> u32 {
        self.links.len() as u32
    }

    pub fn send_to_root(&self, frame: &Frame) -> Result<()> {
        let mut link = self.links[0].lock().unwrap_or_else(|p| p.into_inner());
        write_frame(&mut *link, frame).map_err(|e| UpmError::backend(format!("rank 0: {e}")))
    }

    /// Sends BYE to every rank and stops reporting lost ranks.
    pub fn shutdown(&self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        for link in self.links.iter() {
            let mut s = link.lock().unwrap_or_else(|p| p.into_inner());
            let _ = write_frame(&mut *s, &Frame::bye());
            let _ = s.shutdown(Shutdown::Write);
        }
    }
}

impl Drop for Router {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn route_rank(
    rank: u32,
    stream: TcpStream,
    links: Arc<Vec<Link>>,
    barrier: Arc<Mutex<BarrierState>>,
    events: Sender<RouterEvent>,
    stopping: Arc<AtomicBool>,
) {
    let mut reader = io::BufReader::new(stream);
    let reason = loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break "connection closed".to_string(),
            Err(e) => break e.to_string(),
        };
        match (frame.kind, frame.device_id.as_str()) {
            (FrameKind::Control, MP) => {
                let Some((_, dst)) = mp_header(&frame) else {
                    break "malformed mp frame".to_string();
                };
                let Some(link) = links.get(dst as usize) else {
                    break format!("send to missing rank {dst}");
                };
                // The router stamps the true source rank.
                let forwarded = mp_frame(rank, dst, frame.job_id, &frame.payload[8..]);
                let mut out = link.lock().unwrap_or_else(|p| p.into_inner());
                if let Err(e) = write_frame(&mut *out, &forwarded) {
                    log::debug!("router: forward {rank}->{dst} failed: {e}");
                }
            }
            (FrameKind::Control, BARRIER_ENTER) => {
                let mut b = barrier.lock().unwrap_or_else(|p| p.into_inner());
                if !b.entered[rank as usize] {
                    b.entered[rank as usize] = true;
                    b.count += 1;
                }
                if b.count == b.entered.len() {
                    b.epoch += 1;
                    let release = Frame::new(FrameKind::Control, b.epoch, BARRIER_RELEASE, Vec::new());
                    for link in links.iter() {
                        let mut out = link.lock().unwrap_or_else(|p| p.into_inner());
                        let _ = write_frame(&mut *out, &release);
                    }
                    b.entered.iter_mut().for_each(|e| *e = false);
                    b.count = 0;
                }
            }
            (FrameKind::Response | FrameKind::Error, _) if rank == 0 => {
                let _ = events.send(RouterEvent::FromRoot(frame));
            }
            (FrameKind::Bye, _) => break "rank said BYE".to_string(),
            (kind, dev) => log::warn!("router: unexpected {kind:?} {dev:?} from rank {rank}"),
        }
    };
    if !stopping.load(Ordering::SeqCst) {
        let _ = events.send(RouterEvent::RankLost { rank, reason });
    }
}

#[derive(Default)]
struct InboxState {
    mp: HashMap<(u32, u64), VecDeque<Vec<u8>>>,
    requests: VecDeque<Frame>,
    releases: u64,
    closed: Option<String>,
}

#[derive(Default)]
struct Inbox {
    state: Mutex<InboxState>,
    changed: Condvar,
}

/// A rank's handle on the cluster: point-to-point send/recv, barrier, and
/// (on rank 0) the host job queue.
pub struct Endpoint {
    rank: u32,
    size: u32,
    writer: Mutex<TcpStream>,
    inbox: Arc<Inbox>,
    barriers_entered: AtomicU64,
}

impl Endpoint {
    pub fn connect(addr: &str, rank: u32, size: u32, token: &str) -> Result<Endpoint> {
        let stream = TcpStream::connect(addr).map_err(io_err)?;
        stream.set_nodelay(true).map_err(io_err)?;
        let mut writer = stream.try_clone().map_err(io_err)?;
        write_frame(&mut writer, &Frame::new(FrameKind::Hello, rank.into(), token, size.to_le_bytes().to_vec()))?;
        let inbox = Arc::new(Inbox::default());
        let reader_inbox = inbox.clone();
        thread::Builder::new()
            .name(format!("upm-rank-{rank}"))
            .spawn(move || fill_inbox(stream, reader_inbox))
            .map_err(io_err)?;
        Ok(Endpoint { rank, size, writer: Mutex::new(writer), inbox, barriers_entered: AtomicU64::new(0) })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    fn write(&self, frame: &Frame) -> Result<()> {
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        write_frame(&mut *w, frame).map_err(|e| UpmError::backend(format!("rank {}: {e}", self.rank)))
    }

    pub fn send(&self, dst: u32, tag: u64, data: &[u8]) -> Result<()> {
        if dst >= self.size {
            return Err(UpmError::backend(format!("no rank {dst}")));
        }
        self.write(&mp_frame(self.rank, dst, tag, data))
    }

    /// Blocks until a message from `src` with `tag` arrives.
    pub fn recv(&self, src: u32, tag: u64) -> Result<Vec<u8>> {
        let mut st = self.inbox.state.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(msg) = st.mp.get_mut(&(src, tag)).and_then(|q| q.pop_front()) {
                return Ok(msg);
            }
            if let Some(reason) = &st.closed {
                return Err(UpmError::backend(format!("rank {}: {reason}", self.rank)));
            }
            st = self.inbox.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Returns once every rank has entered the same barrier.
    pub fn barrier(&self) -> Result<()> {
        let epoch = self.barriers_entered.fetch_add(1, Ordering::SeqCst) + 1;
        self.write(&Frame::new(FrameKind::Control, epoch, BARRIER_ENTER, Vec::new()))?;
        let mut st = self.inbox.state.lock().unwrap_or_else(|p| p.into_inner());
        while st.releases < epoch {
            if let Some(reason) = &st.closed {
                return Err(UpmError::backend(format!("rank {}: {reason}", self.rank)));
            }
            st = self.inbox.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        Ok(())
    }

    /// Next host job (rank 0 only). `None` once the host has said BYE.
    pub fn next_request(&self) -> Option<Frame> {
        let mut st = self.inbox.state.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(f) = st.requests.pop_front() {
                return Some(f);
            }
            if st.closed.is_some() {
                return None;
            }
            st = self.inbox.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Sends a RESPONSE or ERROR back to the host.
    pub fn reply(&self, frame: &Frame) -> Result<()> {
        self.write(frame)
    }
}

fn fill_inbox(stream: TcpStream, inbox: Arc<Inbox>) {
    let mut reader = io::BufReader::new(stream);
    let reason = loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => break "router closed".to_string(),
            Err(e) => break e.to_string(),
        };
        let mut st = inbox.state.lock().unwrap_or_else(|p| p.into_inner());
        match (frame.kind, frame.device_id.as_str()) {
            (FrameKind::Control, MP) => {
                if let Some((src, _)) = mp_header(&frame) {
                    let tag = frame.job_id;
                    let mut payload = frame.payload;
                    payload.drain(..8);
                    st.mp.entry((src, tag)).or_default().push_back(payload);
                }
            }
            (FrameKind::Control, BARRIER_RELEASE) => st.releases = st.releases.max(frame.job_id),
            (FrameKind::Request, _) => st.requests.push_back(frame),
            (FrameKind::Bye, _) => break "shutdown".to_string(),
            _ => {}
        }
        inbox.changed.notify_all();
    };
    let mut st = inbox.state.lock().unwrap_or_else(|p| p.into_inner());
    st.closed = Some(reason);
    inbox.changed.notify_all();
}
