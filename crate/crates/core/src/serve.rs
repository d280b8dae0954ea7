//! The runtime over TCP, one device file per connection.
//!
//! | client sends              | server answers                                   |
//! |---------------------------|--------------------------------------------------|
//! | HELLO (first frame)       | HELLO `upm-serve/1`                              |
//! | CONTROL `open <path>`     | CONTROL `ok`                                     |
//! | REQUEST payload           | later, RESPONSE or ERROR with the job id         |
//! | CONTROL `flush`           | outstanding results, then CONTROL `ok`           |
//! | CONTROL `stat`            | CONTROL `pending=<n> submitted=<m>`              |
//! | CONTROL `close`           | CONTROL `ok`                                     |
//! | BYE                       | BYE, then the connection closes                  |
//!
//! Job ids count from 1 per opened file, so clients can predict them.
//! Results are pushed in submission order as soon as they are ready. Failures
//! are ERROR frames whose payload is `VARIANT: detail`; a failed write has
//! job id 0. A frame that cannot be decoded gets an ERROR and the connection
//! is closed.

use std::io::BufReader;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use crate::error::{Result, UpmError};
use crate::fileapi::{DeviceHandle, Runtime};
use crate::framing::{read_frame, write_frame, Frame, FrameKind};

pub const SERVE_HELLO: &str = "upm-serve/1";

const POLL_INTERVAL: Duration = Duration::from_millis(1);

/// Accepts connections until the listener fails.
pub fn serve(rt: Runtime, listener: TcpListener) -> Result<()> {
    for conn in listener.incoming() {
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept: {e}");
                continue;
            }
        };
        let rt = rt.clone();
        thread::Builder::new()
            .name("upm-serve-conn".into())
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = Session::run(&rt, stream) {
                    log::debug!("session {peer:?}: {e}");
                }
            })
            .map_err(|e| UpmError::backend(format!("thread: {e}")))?;
    }
    Ok(())
}

fn control(text: impl Into<String>) -> Frame {
    Frame::new(FrameKind::Control, 0, "", text.into())
}

struct Session {
    out: TcpStream,
    handle: Option<DeviceHandle>,
}

impl Session {
    fn run(rt: &Runtime, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true).map_err(|e| UpmError::backend(e.to_string()))?;
        let input = stream.try_clone().map_err(|e| UpmError::backend(e.to_string()))?;
        let (tx, rx) = mpsc::channel::<Result<Frame>>();
        thread::spawn(move || {
            let mut reader = BufReader::new(input);
            loop {
                match read_frame(&mut reader) {
                    Ok(Some(f)) => {
                        if tx.send(Ok(f)).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });

        let mut session = Session { out: stream, handle: None };
        let mut greeted = false;
        loop {
            let busy = session.handle.as_ref().is_some_and(|h| h.pending() > 0);
            let next = if busy {
                match rx.recv_timeout(POLL_INTERVAL) {
                    Ok(f) => Some(f),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            } else {
                match rx.recv() {
                    Ok(f) => Some(f),
                    Err(_) => break,
                }
            };
            session.push_ready()?;
            let frame = match next {
                None => continue,
                Some(Ok(f)) => f,
                Some(Err(e)) => {
                    session.send(&Frame::error(0, &e))?;
                    break;
                }
            };
            if !greeted {
                if frame.kind != FrameKind::Hello {
                    session.send(&Frame::error(0, &UpmError::protocol("hello")))?;
                    break;
                }
                greeted = true;
                session.send(&Frame::hello(SERVE_HELLO))?;
                continue;
            }
            match frame.kind {
                FrameKind::Bye => {
                    session.close();
                    session.send(&Frame::bye())?;
                    break;
                }
                FrameKind::Control => session.control(rt, &frame)?,
                FrameKind::Request => {
                    let written = match session.handle.as_mut() {
                        Some(h) => h.write(&frame.payload).map(|_| ()),
                        None => Err(UpmError::DeviceClosed),
                    };
                    if let Err(e) = written {
                        session.send(&Frame::error(0, &e))?;
                    }
                }
                FrameKind::Hello => session.send(&Frame::hello(SERVE_HELLO))?,
                FrameKind::Response | FrameKind::Error => {
                    session.send(&Frame::error(frame.job_id, &UpmError::protocol("kind")))?
                }
            }
        }
        session.close();
        // Also unblocks the reader thread, which holds a clone of the socket.
        let _ = session.out.shutdown(Shutdown::Both);
        Ok(())
    }

    fn send(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.out, frame)
    }

    fn close(&mut self) {
        if let Some(mut h) = self.handle.take() {
            h.close();
        }
    }

    /// Pushes every finished result at the head of the queue.
    fn push_ready(&mut self) -> Result<()> {
        while let Some((id, result)) = self.handle.as_mut().and_then(DeviceHandle::poll) {
            let frame = match result {
                Ok(bytes) => Frame::new(FrameKind::Response, id.0, "", bytes),
                Err(e) => Frame::error(id.0, &e),
            };
            self.send(&frame)?;
        }
        Ok(())
    }

    fn control(&mut self, rt: &Runtime, frame: &Frame) -> Result<()> {
        let Ok(text) = frame.payload_str() else {
            return self.send(&Frame::error(0, &UpmError::protocol("control")));
        };
        let (cmd, arg) = text.split_once(' ').unwrap_or((text, ""));
        let reply = match (cmd, self.handle.as_mut()) {
            ("open", _) => {
                self.close();
                rt.open(arg.trim()).map(|h| {
                    self.handle = Some(h);
                    "ok".to_string()
                })
            }
            ("close", _) => {
                self.close();
                Ok("ok".to_string())
            }
            ("flush", Some(h)) => h.control("flush"),
            ("stat", Some(h)) => h.control("stat"),
            ("flush" | "stat", None) => Err(UpmError::DeviceClosed),
            (other, _) => Err(UpmError::protocol(format!("control {other:?}"))),
        };
        self.push_ready()?;
        match reply {
            Ok(text) => self.send(&control(text)),
            Err(e) => self.send(&Frame::error(0, &e)),
        }
    }
}
