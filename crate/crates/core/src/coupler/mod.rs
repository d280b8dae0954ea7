//! Coupled applications: each app runs on its own cluster device, and a
//! coordinator relays addressed envelopes between them using nothing but
//! the file API.
//!
//! One relay pass, for apps in declared order:
//!
//! 1. take at most one outbound envelope from each app, unless its
//!    destination queue is full (`buffer_bound`), in which case it waits at
//!    the sender;
//! 2. queue it for its destination;
//! 3. deliver at most one queued envelope to each app.

pub mod app;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;

use serde::Deserialize;

use crate::backends::kernels::COUPLED_APP;
use crate::error::{Result, UpmError};
use crate::fileapi::{DeviceHandle, Runtime};
use crate::model::DeviceClass;
use app::{Action, AppCommand, AppReply, Envelope};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub app_id: String,
    /// Name of an installed CLUSTER device with model `coupled-app`.
    pub device: String,
    pub script: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingTopology {
    pub apps: Vec<AppSpec>,
    pub buffer_bound: usize,
}

impl CouplingTopology {
    pub fn from_json(json: &str) -> Result<CouplingTopology> {
        serde_json::from_str(json).map_err(|e| UpmError::invalid_spec(format!("parse: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CouplingState {
    Running,
    Quiescent,
    Stalled,
    Failed { app_id: String, error: UpmError },
}

impl fmt::Display for CouplingState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CouplingState::Running => "RUNNING",
            CouplingState::Quiescent => "QUIESCENT",
            CouplingState::Stalled => "STALLED",
            CouplingState::Failed { .. } => "FAILED",
        })
    }
}

/// `(src, dst, tag)`.
pub type Channel = (String, String, String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuiescenceReport {
    /// Envelopes delivered per channel.
    pub channels: BTreeMap<Channel, u64>,
    pub state: CouplingState,
    pub steps: u64,
}

impl QuiescenceReport {
    /// `channel <src> <dst> <tag> <count>` lines in channel order, then
    /// `state=<STATE>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for ((src, dst, tag), count) in &self.channels {
            out.push_str(&format!("channel {src} {dst} {tag} {count}\n"));
        }
        if let CouplingState::Failed { app_id, error } = &self.state {
            out.push_str(&format!("failed {app_id} {error}\n"));
        }
        out.push_str(&format!("state={}\n", self.state));
        out
    }
}

struct AppSlot {
    id: String,
    handle: DeviceHandle,
    halted: bool,
    outbox_len: usize,
}

impl AppSlot {
    fn call(&mut self, command: &AppCommand) -> Result<AppReply> {
        let bytes = serde_json::to_vec(command).map_err(|e| UpmError::backend(format!("encode: {e}")))?;
        self.handle.write(&bytes)?;
        let reply = self.handle.read(None)?;
        let reply: AppReply =
            serde_json::from_slice(&reply).map_err(|e| UpmError::protocol(format!("app reply: {e}")))?;
        self.halted = reply.halted;
        self.outbox_len = reply.outbox_len;
        Ok(reply)
    }
}

/// The super-application: owns one handle per app and every queue between
/// them.
pub struct Coordinator {
    apps: Vec<AppSlot>,
    index: HashMap<String, usize>,
    queues: Vec<VecDeque<Envelope>>,
    buffer_bound: usize,
    delivered: BTreeMap<Channel, u64>,
    state: CouplingState,
    steps: u64,
}

fn validate(rt: &Runtime, t: &CouplingTopology) -> Result<()> {
    if t.buffer_bound == 0 {
        return Err(UpmError::invalid_spec("buffer_bound"));
    }
    let mut ids = HashSet::new();
    let mut devices = HashSet::new();
    for a in &t.apps {
        if a.app_id.is_empty() || a.app_id.contains(char::is_whitespace) || !ids.insert(a.app_id.as_str()) {
            return Err(UpmError::invalid_spec("app_id"));
        }
        let d = rt.registry().lookup(&a.device)?;
        if d.class != DeviceClass::Cluster {
            return Err(UpmError::invalid_spec("class"));
        }
        if d.model_id != COUPLED_APP {
            return Err(UpmError::invalid_spec("model"));
        }
        if !devices.insert(a.device.as_str()) {
            return Err(UpmError::invalid_spec("device"));
        }
    }
    for a in &t.apps {
        if app::peers(&a.script).iter().any(|p| !ids.contains(p)) {
            return Err(UpmError::invalid_spec("script"));
        }
        for action in app::expand(&a.script)? {
            match action {
                Action::Send { tag, payload: app::PayloadSource::Hex(h), .. } => {
                    if hex::decode(h).is_err() || tag.contains(char::is_whitespace) {
                        return Err(UpmError::invalid_spec("script"));
                    }
                }
                Action::Send { tag, .. } | Action::Recv { tag, .. } if tag.contains(char::is_whitespace) => {
                    return Err(UpmError::invalid_spec("script"));
                }
                _ => {}
            }
        }
    }
    Ok(())
}

impl Coordinator {
    /// Opens every app's device and loads its script.
    pub fn start(rt: &Runtime, t: &CouplingTopology) -> Result<Coordinator> {
        validate(rt, t)?;
        let mut apps = Vec::with_capacity(t.apps.len());
        for a in &t.apps {
            let handle = rt.open(&format!("upm://{}", a.device))?;
            let mut slot = AppSlot { id: a.app_id.clone(), handle, halted: false, outbox_len: 0 };
            slot.call(&AppCommand::Load { app_id: a.app_id.clone(), script: a.script.clone() })?;
            apps.push(slot);
        }
        let index = apps.iter().enumerate().map(|(i, a)| (a.id.clone(), i)).collect();
        Ok(Coordinator {
            queues: vec![VecDeque::new(); apps.len()],
            apps,
            index,
            buffer_bound: t.buffer_bound,
            delivered: BTreeMap::new(),
            state: CouplingState::Running,
            steps: 0,
        })
    }

    pub fn state(&self) -> &CouplingState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Open handles held for the apps.
    pub fn open_handles(&self) -> usize {
        self.apps.iter().filter(|a| a.handle.is_open()).count()
    }

    pub fn delivered(&self) -> &BTreeMap<Channel, u64> {
        &self.delivered
    }

    /// Envelopes waiting in the coordinator for `app_id`.
    pub fn queued_for(&self, app_id: &str) -> usize {
        self.index.get(app_id).map_or(0, |&i| self.queues[i].len())
    }

    pub fn is_quiescent(&self) -> bool {
        self.apps.iter().all(|a| a.halted && a.outbox_len == 0) && self.queues.iter().all(VecDeque::is_empty)
    }

    fn fail(&mut self, app: usize, error: UpmError) -> UpmError {
        let app_id = self.apps[app].id.clone();
        self.state = CouplingState::Failed { app_id: app_id.clone(), error: error.clone() };
        UpmError::backend(format!("{app_id}: {error}"))
    }

    /// One round-robin relay pass. Returns whether any envelope moved.
    pub fn relay_step(&mut self) -> Result<bool> {
        if self.state != CouplingState::Running {
            return Ok(false);
        }
        let mut moved = false;
        for i in 0..self.apps.len() {
            if self.apps[i].outbox_len == 0 {
                continue;
            }
            let blocked: Vec<String> = self
                .apps
                .iter()
                .zip(&self.queues)
                .filter(|(_, q)| q.len() >= self.buffer_bound)
                .map(|(a, _)| a.id.clone())
                .collect();
            let reply = match self.apps[i].call(&AppCommand::Take { blocked }) {
                Ok(r) => r,
                Err(e) => return Err(self.fail(i, e)),
            };
            if let Some(env) = reply.envelope {
                let Some(&dst) = self.index.get(&env.dst) else {
                    return Err(self.fail(i, UpmError::protocol(format!("unknown destination {}", env.dst))));
                };
                self.queues[dst].push_back(env);
                moved = true;
            }
        }
        for j in 0..self.apps.len() {
            let Some(env) = self.queues[j].pop_front() else { continue };
            let channel = (env.src.clone(), env.dst.clone(), env.tag.clone());
            if let Err(e) = self.apps[j].call(&AppCommand::Deliver { envelope: env }) {
                return Err(self.fail(j, e));
            }
            *self.delivered.entry(channel).or_insert(0) += 1;
            moved = true;
        }
        Ok(moved)
    }

    /// Relays until every app has halted with nothing in flight, or
    /// `max_steps` passes have run.
    pub fn run_until_quiescent(&mut self, max_steps: u64) -> QuiescenceReport {
        while self.state == CouplingState::Running {
            if self.steps >= max_steps {
                self.state = if self.is_quiescent() { CouplingState::Quiescent } else { CouplingState::Stalled };
                break;
            }
            if self.relay_step().is_err() {
                break;
            }
            self.steps += 1;
            if self.is_quiescent() {
                self.state = CouplingState::Quiescent;
            }
        }
        self.report()
    }

    pub fn report(&self) -> QuiescenceReport {
        QuiescenceReport { channels: self.delivered.clone(), state: self.state.clone(), steps: self.steps }
    }

    /// Every envelope `app_id` has received, in order.
    pub fn received_log(&mut self, app_id: &str) -> Result<Vec<Envelope>> {
        let &i = self.index.get(app_id).ok_or_else(|| UpmError::invalid_spec("app_id"))?;
        Ok(self.apps[i].call(&AppCommand::Log)?.received.unwrap_or_default())
    }

    /// Closes every handle, which stops the app clusters. Idempotent.
    pub fn shutdown(&mut self) {
        for a in &mut self.apps {
            a.handle.close();
        }
    }
}

impl Drop for Coordinator {
    fn drop(&mut self) {
        self.shutdown();
    }
}
