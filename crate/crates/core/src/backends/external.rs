//! Plug-in printers living in another process, reached over stdio pipes
//! (`SPAWN`) or TCP (`CONNECT`).
//!
//! The plug-in speaks first with `HELLO{payload = model_id}`. After that the
//! runtime sends `REQUEST{job_id}` frames and the plug-in answers each with
//! `RESPONSE` or `ERROR` carrying the same job id, in any order. The runtime
//! says `BYE` when it is done.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{job_timeout, param_duration, resolve_program, Backend, JobBoard, Kernel, Ticket};
use crate::error::{Result, UpmError};
use crate::framing::{read_frame, write_frame, Frame, FrameKind};
use crate::model::{DeviceDescriptor, TransportSpec};

enum Link {
    Pipe(BufWriter<ChildStdin>),
    Tcp(TcpStream),
}

impl Link {
    fn send(&mut self, frame: &Frame) -> Result<()> {
        match self {
            Link::Pipe(w) => {
                write_frame(w, frame)?;
                w.flush().map_err(|e| UpmError::backend(format!("plug-in: {e}")))
            }
            Link::Tcp(s) => write_frame(s, frame),
        }
    }

    fn close(&mut self) {
        match self {
            Link::Pipe(w) => {
                let _ = w.flush();
            }
            Link::Tcp(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
        }
    }
}

pub struct ExternalBackend {
    descriptor: DeviceDescriptor,
    board: Arc<JobBoard>,
    link: Mutex<Option<Link>>,
    child: Mutex<Option<Child>>,
    stopping: Arc<AtomicBool>,
    job_timeout: Duration,
}

/// Spawns or connects to the plug-in and completes the handshake.
pub fn external_attach(descriptor: &DeviceDescriptor) -> Result<ExternalBackend> {
    let handshake = param_duration(descriptor, "handshake_timeout_ms", super::DEFAULT_HANDSHAKE_TIMEOUT)?;
    let (link, reader, child): (Link, Box<dyn Read + Send>, Option<Child>) = match &descriptor.transport {
        TransportSpec::Spawn(spawn) => {
            let (program, args) = spawn
                .command
                .split_first()
                .ok_or_else(|| UpmError::InvalidManifest("command".into()))?;
            let mut child = Command::new(resolve_program(program))
                .args(args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| UpmError::backend(format!("spawn {program}: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            (Link::Pipe(BufWriter::new(stdin)), Box::new(stdout), Some(child))
        }
        TransportSpec::Connect(c) => {
            let stream = connect(&c.address, handshake)?;
            let reader = stream.try_clone().map_err(|e| UpmError::backend(format!("connect: {e}")))?;
            (Link::Tcp(stream), Box::new(reader), None)
        }
        TransportSpec::Inproc => return Err(UpmError::InvalidManifest("transport/class".into())),
    };

    let board = Arc::new(JobBoard::new());
    let stopping = Arc::new(AtomicBool::new(false));
    let (hello_tx, hello_rx) = mpsc::channel();
    {
        let board = board.clone();
        let stopping = stopping.clone();
        thread::Builder::new()
            .name(format!("upm-{}-reader", descriptor.name))
            .spawn(move || read_plugin(reader, hello_tx, board, stopping))
            .map_err(|e| UpmError::backend(format!("thread: {e}")))?;
    }
    let backend = ExternalBackend {
        descriptor: descriptor.clone(),
        board,
        link: Mutex::new(Some(link)),
        child: Mutex::new(child),
        stopping,
        job_timeout: job_timeout(descriptor)?,
    };
    let checked = match hello_rx.recv_timeout(handshake) {
        Ok(Ok(hello)) if hello.kind != FrameKind::Hello => Err(UpmError::protocol("handshake")),
        Ok(Ok(hello)) if hello.payload != descriptor.model_id.as_bytes() => Err(UpmError::protocol("model")),
        Ok(Ok(_)) => Ok(()),
        Ok(Err(e)) => Err(e),
        Err(mpsc::RecvTimeoutError::Timeout) => Err(UpmError::Timeout),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(UpmError::backend("plug-in exited before HELLO")),
    };
    match checked {
        Ok(()) => Ok(backend),
        Err(e) => {
            backend.shutdown(Duration::ZERO);
            Err(e)
        }
    }
}

fn connect(address: &str, timeout: Duration) -> Result<TcpStream> {
    let err = |e: io::Error| UpmError::backend(format!("connect {address}: {e}"));
    let mut last = None;
    for addr in address.to_socket_addrs().map_err(err)? {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                s.set_nodelay(true).map_err(err)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(err(last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address"))))
}

fn read_plugin(
    reader: Box<dyn Read + Send>,
    hello: mpsc::Sender<Result<Frame>>,
    board: Arc<JobBoard>,
    stopping: Arc<AtomicBool>,
) {
    let mut reader = BufReader::new(reader);
    match read_frame(&mut reader) {
        Ok(Some(f)) => {
            if hello.send(Ok(f)).is_err() {
                return;
            }
        }
        Ok(None) => return,
        Err(e) => {
            let _ = hello.send(Err(e));
            return;
        }
    }
    let failure = loop {
        match read_frame(&mut reader) {
            Ok(Some(f)) => match f.kind {
                FrameKind::Response => board.complete(Ticket(f.job_id), Ok(f.payload)),
                FrameKind::Error => {
                    board.complete(Ticket(f.job_id), Err(UpmError::backend(String::from_utf8_lossy(&f.payload))))
                }
                FrameKind::Bye => break UpmError::backend("plug-in said BYE"),
                _ => break UpmError::protocol("unexpected frame"),
            },
            Ok(None) => break UpmError::backend("plug-in exited"),
            Err(e) => break e,
        }
    };
    if !stopping.load(Ordering::SeqCst) {
        board.fail_all(failure);
    }
}

impl ExternalBackend {
    fn shutdown(&self, grace: Duration) {
        self.stopping.store(true, Ordering::SeqCst);
        self.board.close();
        if let Some(mut link) = self.link.lock().unwrap_or_else(|p| p.into_inner()).take() {
            let _ = link.send(&Frame::bye());
            link.close();
        }
        if let Some(mut child) = self.child.lock().unwrap_or_else(|p| p.into_inner()).take() {
            let deadline = Instant::now() + grace;
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
}

impl Backend for ExternalBackend {
    fn descriptor(&self) -> &DeviceDescriptor {
        &self.descriptor
    }

    fn board(&self) -> &JobBoard {
        &self.board
    }

    fn submit(&self, kernel: &str, payload: Vec<u8>) -> Result<Ticket> {
        if kernel != self.descriptor.model_id {
            return Err(UpmError::backend("model"));
        }
        let ticket = self.board.register(Some(self.job_timeout))?;
        let mut link = self.link.lock().unwrap_or_else(|p| p.into_inner());
        let sent = match link.as_mut() {
            Some(l) => l.send(&Frame::new(FrameKind::Request, ticket.0, kernel, payload)),
            None => Err(UpmError::DeviceClosed),
        };
        if let Err(e) = sent {
            self.board.complete(ticket, Err(e));
        }
        Ok(ticket)
    }

    fn processes(&self) -> Vec<u32> {
        self.child.lock().unwrap_or_else(|p| p.into_inner()).iter().map(Child::id).collect()
    }

    fn stop(&self) {
        self.shutdown(Duration::from_secs(2));
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        self.shutdown(Duration::from_millis(200));
    }
}

/// Behaviour of the reference plug-in.
#[derive(Debug, Clone)]
pub struct PluginOptions {
    /// Kernel run on every request.
    pub model: String,
    /// Model announced in HELLO; defaults to `model`.
    pub hello_model: Option<String>,
    /// When set, every request is answered with this ERROR text.
    pub fail_with: Option<String>,
}

/// One plug-in session: HELLO, then answer requests until BYE or EOF.
pub fn plugin_session<R: Read, W: Write>(reader: R, writer: W, opts: &PluginOptions) -> Result<()> {
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let flush = |w: &mut BufWriter<W>| w.flush().map_err(|e| UpmError::backend(format!("write: {e}")));
    let announced = opts.hello_model.as_deref().unwrap_or(&opts.model);
    write_frame(&mut writer, &Frame::hello(announced.as_bytes().to_vec()))?;
    flush(&mut writer)?;
    let kernel = Kernel::from_name(&opts.model);
    while let Some(frame) = read_frame(&mut reader)? {
        let reply = match frame.kind {
            FrameKind::Request => {
                let result = match (&opts.fail_with, kernel) {
                    (Some(msg), _) => Err(msg.clone()),
                    (None, Some(k)) => k.run(&frame.payload).map_err(|e| e.to_string()),
                    (None, None) => Err(format!("unknown model {}", opts.model)),
                };
                match result {
                    Ok(bytes) => Frame::new(FrameKind::Response, frame.job_id, "", bytes),
                    Err(msg) => Frame::new(FrameKind::Error, frame.job_id, "", msg),
                }
            }
            FrameKind::Bye => break,
            _ => continue,
        };
        write_frame(&mut writer, &reply)?;
        flush(&mut writer)?;
    }
    Ok(())
}
