//! Application scripts and the interpreter hosted on rank 0 of a
//! `coupled-app` cluster.
//!
//! The coordinator drives an app only through jobs written to its device:
//! each job is one JSON [`AppCommand`] and each result one JSON [`AppReply`].

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UpmError};

/// Expanded scripts longer than this are rejected.
pub const MAX_SCRIPT_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Send { dst: String, tag: String, payload: PayloadSource },
    Recv { src: String, tag: String },
    /// Runs a kernel on the cluster over the last received payload and
    /// makes the result the new last received payload.
    Compute { kernel: String },
    /// `body` repeated `times` times.
    Repeat { times: u32, body: Vec<Action> },
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadSource {
    Text(String),
    Hex(String),
    LastReceived,
}

/// An addressed message between two apps. `seq` counts from 1 per
/// `(src, dst, tag)` channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub src: String,
    pub dst: String,
    pub tag: String,
    pub seq: u64,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum AppCommand {
    Load { app_id: String, script: Vec<Action> },
    /// Removes the next outbound envelope unless its destination is listed
    /// in `blocked`, in which case it stays put.
    Take { blocked: Vec<String> },
    Deliver { envelope: Envelope },
    Status,
    /// Every envelope the app has consumed with RECV, in order.
    Log,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppReply {
    pub halted: bool,
    pub outbox_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<Envelope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received: Option<Vec<Envelope>>,
}

/// Inlines `repeat` blocks.
pub fn expand(script: &[Action]) -> Result<Vec<Action>> {
    fn go(actions: &[Action], out: &mut Vec<Action>) -> Result<()> {
        for a in actions {
            match a {
                Action::Repeat { times, body } => {
                    for _ in 0..*times {
                        go(body, out)?;
                    }
                }
                other => {
                    if out.len() >= MAX_SCRIPT_LEN {
                        return Err(UpmError::invalid_spec("script"));
                    }
                    out.push(other.clone());
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    go(script, &mut out)?;
    Ok(out)
}

/// App ids a script sends to or receives from.
pub fn peers(script: &[Action]) -> Vec<&str> {
    let mut out = Vec::new();
    for a in script {
        match a {
            Action::Send { dst, .. } => out.push(dst.as_str()),
            Action::Recv { src, .. } => out.push(src.as_str()),
            Action::Repeat { body, .. } => out.extend(peers(body)),
            Action::Compute { .. } | Action::Halt => {}
        }
    }
    out
}

fn resolve_payload(source: &PayloadSource, last: &[u8]) -> Result<Vec<u8>> {
    match source {
        PayloadSource::Text(t) => Ok(t.clone().into_bytes()),
        PayloadSource::Hex(h) => hex::decode(h).map_err(|_| UpmError::invalid_spec("script")),
        PayloadSource::LastReceived => Ok(last.to_vec()),
    }
}

/// A loaded application script and its progress.
#[derive(Debug, Default)]
struct App {
    id: String,
    script: Vec<Action>,
    pc: usize,
    halted: bool,
    outbox: VecDeque<Envelope>,
    inbox: HashMap<(String, String), VecDeque<Envelope>>,
    last: Vec<u8>,
    next_seq: HashMap<(String, String), u64>,
    received: Vec<Envelope>,
}

impl App {
    /// Runs until HALT or a RECV with nothing to receive.
    fn advance(&mut self, compute: &mut dyn FnMut(&str, &[u8]) -> Result<Vec<u8>>) -> Result<()> {
        while !self.halted {
            let Some(action) = self.script.get(self.pc) else {
                self.halted = true;
                break;
            };
            match action {
                Action::Send { dst, tag, payload } => {
                    let seq = self.next_seq.entry((dst.clone(), tag.clone())).or_insert(0);
                    *seq += 1;
                    self.outbox.push_back(Envelope {
                        src: self.id.clone(),
                        dst: dst.clone(),
                        tag: tag.clone(),
                        seq: *seq,
                        payload: resolve_payload(payload, &self.last)?,
                    });
                }
                Action::Recv { src, tag } => {
                    let Some(env) = self.inbox.get_mut(&(src.clone(), tag.clone())).and_then(VecDeque::pop_front) else {
                        break;
                    };
                    self.last = env.payload.clone();
                    self.received.push(env);
                }
                Action::Compute { kernel } => self.last = compute(kernel, &self.last)?,
                Action::Halt => {
                    self.halted = true;
                    break;
                }
                Action::Repeat { .. } => unreachable!("scripts are expanded on load"),
            }
            self.pc += 1;
        }
        Ok(())
    }
}

/// The interpreter state kept by rank 0 between jobs.
#[derive(Debug, Default)]
pub struct AppHost {
    app: Option<App>,
}

impl AppHost {
    /// Executes one command. `compute` runs a kernel on the app's cluster.
    pub fn handle(
        &mut self,
        command: &[u8],
        compute: &mut dyn FnMut(&str, &[u8]) -> Result<Vec<u8>>,
    ) -> Result<Vec<u8>> {
        let command: AppCommand =
            serde_json::from_slice(command).map_err(|e| UpmError::protocol(format!("app command: {e}")))?;
        let mut reply = AppReply::default();
        if let AppCommand::Load { app_id, script } = command {
            let mut app = App { id: app_id, script: expand(&script)?, ..App::default() };
            app.advance(compute)?;
            self.app = Some(app);
        } else {
            let app = self.app.as_mut().ok_or_else(|| UpmError::protocol("app not loaded"))?;
            match command {
                AppCommand::Load { .. } => unreachable!(),
                AppCommand::Take { blocked } => {
                    if app.outbox.front().is_some_and(|e| !blocked.contains(&e.dst)) {
                        reply.envelope = app.outbox.pop_front();
                    }
                }
                AppCommand::Deliver { envelope } => {
                    if envelope.dst != app.id {
                        return Err(UpmError::protocol("misaddressed envelope"));
                    }
                    app.inbox.entry((envelope.src.clone(), envelope.tag.clone())).or_default().push_back(envelope);
                    app.advance(compute)?;
                }
                AppCommand::Status => {}
                AppCommand::Log => reply.received = Some(app.received.clone()),
            }
        }
        let app = self.app.as_ref().expect("loaded above");
        reply.halted = app.halted;
        reply.outbox_len = app.outbox.len();
        serde_json::to_vec(&reply).map_err(|e| UpmError::backend(format!("app reply: {e}")))
    }
}
