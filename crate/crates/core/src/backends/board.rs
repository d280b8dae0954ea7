use std::collections::HashMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::{Result, UpmError};

/// Backend-wide job number. Handles map their own `JobId`s onto these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ticket(pub u64);

enum Slot {
    Running { deadline: Option<Instant> },
    Done(Result<Vec<u8>>),
}

struct State {
    next: u64,
    slots: HashMap<u64, Slot>,
    closed: bool,
    failure: Option<UpmError>,
}

/// Completion table: submitters register tickets, executors complete them,
/// readers wait on them.
pub struct JobBoard {
    state: Mutex<State>,
    changed: Condvar,
}

impl Default for JobBoard {
    fn default() -> Self {
        JobBoard::new()
    }
}

impl JobBoard {
    pub fn new() -> JobBoard {
        JobBoard {
            state: Mutex::new(State { next: 1, slots: HashMap::new(), closed: false, failure: None }),
            changed: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Registers a running job. `job_timeout` bounds how long it may run
    /// before readers see `TIMEOUT` (and the job is dropped).
    pub fn register(&self, job_timeout: Option<Duration>) -> Result<Ticket> {
        let mut st = self.lock();
        if let Some(e) = &st.failure {
            return Err(e.clone());
        }
        if st.closed {
            return Err(UpmError::DeviceClosed);
        }
        let id = st.next;
        st.next += 1;
        st.slots.insert(id, Slot::Running { deadline: job_timeout.map(|t| Instant::now() + t) });
        Ok(Ticket(id))
    }

    /// Stores a result. Completions for dropped or unknown tickets are ignored.
    pub fn complete(&self, ticket: Ticket, result: Result<Vec<u8>>) {
        let mut st = self.lock();
        if let Some(slot @ Slot::Running { .. }) = st.slots.get_mut(&ticket.0) {
            *slot = Slot::Done(result);
            self.changed.notify_all();
        }
    }

    /// Fails every running job with `err`; later registrations fail too.
    pub fn fail_all(&self, err: UpmError) {
        let mut st = self.lock();
        for slot in st.slots.values_mut() {
            if matches!(slot, Slot::Running { .. }) {
                *slot = Slot::Done(Err(err.clone()));
            }
        }
        st.failure.get_or_insert(err);
        self.changed.notify_all();
    }

    /// Refuses new registrations with `DEVICE_CLOSED` and fails running jobs.
    pub fn close(&self) {
        let mut st = self.lock();
        st.closed = true;
        for slot in st.slots.values_mut() {
            if matches!(slot, Slot::Running { .. }) {
                *slot = Slot::Done(Err(UpmError::DeviceClosed));
            }
        }
        self.changed.notify_all();
    }

    pub fn failure(&self) -> Option<UpmError> {
        self.lock().failure.clone()
    }

    pub fn is_done(&self, ticket: Ticket) -> bool {
        matches!(self.lock().slots.get(&ticket.0), Some(Slot::Done(_)))
    }

    /// True while the ticket is running or holds an uncollected result.
    pub fn contains(&self, ticket: Ticket) -> bool {
        self.lock().slots.contains_key(&ticket.0)
    }

    /// Forgets a ticket; a late completion is ignored.
    pub fn discard(&self, ticket: Ticket) {
        self.lock().slots.remove(&ticket.0);
    }

    /// Waits for the ticket to finish and removes its result.
    ///
    /// A reader timeout leaves the job in place. A job that outlives its
    /// deadline finishes with `TIMEOUT`.
    pub fn take(&self, ticket: Ticket, timeout: Option<Duration>) -> Result<Vec<u8>> {
        let mut st = self.wait_done(ticket, timeout)?;
        match st.slots.remove(&ticket.0) {
            Some(Slot::Done(result)) => result,
            _ => unreachable!("wait_done returned without a finished slot"),
        }
    }

    /// Waits for the ticket to finish without consuming the result.
    pub fn wait(&self, ticket: Ticket, timeout: Option<Duration>) -> Result<()> {
        self.wait_done(ticket, timeout).map(|_| ())
    }

    fn wait_done(&self, ticket: Ticket, timeout: Option<Duration>) -> Result<MutexGuard<'_, State>> {
        let read_deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.lock();
        loop {
            let job_deadline = match st.slots.get(&ticket.0) {
                None => return Err(UpmError::backend(format!("unknown job {}", ticket.0))),
                Some(Slot::Done(_)) => return Ok(st),
                Some(Slot::Running { deadline }) => *deadline,
            };
            let now = Instant::now();
            if job_deadline.is_some_and(|d| now >= d) {
                st.slots.insert(ticket.0, Slot::Done(Err(UpmError::Timeout)));
                return Ok(st);
            }
            if read_deadline.is_some_and(|d| now >= d) {
                return Err(UpmError::Timeout);
            }
            let wake = [job_deadline, read_deadline].into_iter().flatten().min();
            st = match wake {
                Some(at) => self.changed.wait_timeout(st, at - now).unwrap_or_else(|p| p.into_inner()).0,
                None => self.changed.wait(st).unwrap_or_else(|p| p.into_inner()),
            };
        }
    }
}
