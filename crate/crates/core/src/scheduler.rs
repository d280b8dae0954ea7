//! Placing a batch of jobs onto installed devices.
//!
//! A job takes `cost / speed_factor` time units on a device; a device's load
//! is the sum over its jobs and the makespan is the largest load. Loads are
//! computed exactly: every job/device time is scaled by the common
//! denominator of all of them, so comparisons are integer comparisons.

use std::collections::{BTreeMap, HashSet};

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::backends::kernels;
use crate::error::{Result, UpmError};
use crate::model::{DeviceDescriptor, Rational};

/// Largest batch `optimal_assign` accepts.
pub const OPTIMAL_MAX_JOBS: usize = 12;
/// Largest number of usable devices `optimal_assign` accepts.
pub const OPTIMAL_MAX_DEVICES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub id: String,
    pub model_id: String,
    pub language: String,
    pub cost: Rational,
}

impl JobSpec {
    pub fn new(id: &str, model_id: &str, language: &str, cost: Rational) -> JobSpec {
        JobSpec { id: id.into(), model_id: model_id.into(), language: language.into(), cost }
    }
}

pub fn parse_jobs(json: &str) -> Result<Vec<JobSpec>> {
    serde_json::from_str(json).map_err(|e| UpmError::invalid_spec(format!("parse: {e}")))
}

/// Job id to device name.
pub type Assignment = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub assignment: Assignment,
    pub makespan: Rational,
}

impl Schedule {
    /// One `job → device` line per job (by job id), then `makespan=<decimal>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (job, device) in &self.assignment {
            out.push_str(&format!("{job} → {device}\n"));
        }
        out.push_str(&format!("makespan={}\n", self.makespan.to_decimal_string()));
        out
    }
}

pub fn feasible(j: &JobSpec, d: &DeviceDescriptor) -> bool {
    if !d.languages.contains(&j.language) {
        return false;
    }
    j.model_id == d.model_id
        || kernels::kernel_set_members(&d.model_id).is_some_and(|set| set.iter().any(|k| k.name() == j.model_id))
}

/// Largest per-device sum of `cost / speed_factor`. Jobs mapped to unknown
/// devices are ignored.
pub fn makespan(a: &Assignment, jobs: &[JobSpec], devices: &[DeviceDescriptor]) -> Rational {
    let mut loads: BTreeMap<&str, Rational> = BTreeMap::new();
    for j in jobs {
        let Some(name) = a.get(&j.id) else { continue };
        let Some(d) = devices.iter().find(|d| &d.name == name) else { continue };
        let load = loads.entry(name).or_insert_with(Rational::zero);
        *load = *load + j.cost / d.speed_factor;
    }
    loads.into_values().max_by(|a, b| a.0.cmp(&b.0)).unwrap_or_else(Rational::zero)
}

/// Jobs and the devices that can run at least one of them, with every
/// job/device time scaled to an integer.
struct Instance<'a> {
    jobs: Vec<&'a JobSpec>,
    devices: Vec<&'a DeviceDescriptor>,
    /// `time[j][d]`, `None` when infeasible.
    time: Vec<Vec<Option<i128>>>,
    scale: i128,
}

impl<'a> Instance<'a> {
    fn new(jobs: &'a [JobSpec], devices: &'a [DeviceDescriptor]) -> Result<Instance<'a>> {
        let mut seen = HashSet::new();
        for j in jobs {
            if !j.cost.is_positive() {
                return Err(UpmError::invalid_spec(format!("cost ({})", j.id)));
            }
            if !seen.insert(j.id.as_str()) {
                return Err(UpmError::invalid_spec(format!("id ({})", j.id)));
            }
        }
        let mut devices: Vec<&DeviceDescriptor> =
            devices.iter().filter(|d| jobs.iter().any(|j| feasible(j, d))).collect();
        devices.sort_by(|a, b| a.name.cmp(&b.name));
        let mut jobs: Vec<&JobSpec> = jobs.iter().collect();
        jobs.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(j) = jobs.iter().find(|j| !devices.iter().any(|d| feasible(j, d))) {
            return Err(UpmError::InfeasibleJob(j.id.clone()));
        }
        let exact: Vec<Vec<Option<Rational>>> = jobs
            .iter()
            .map(|j| devices.iter().map(|d| feasible(j, d).then(|| j.cost / d.speed_factor)).collect())
            .collect();
        let scale = exact.iter().flatten().flatten().fold(1i128, |acc, t| acc.lcm(&t.denom()));
        let time = exact
            .iter()
            .map(|row| row.iter().map(|t| t.map(|t| t.numer() * (scale / t.denom()))).collect())
            .collect();
        Ok(Instance { jobs, devices, time, scale })
    }

    fn schedule(&self, choice: &[usize], span: i128) -> Schedule {
        Schedule {
            assignment: self
                .jobs
                .iter()
                .zip(choice)
                .map(|(j, &d)| (j.id.clone(), self.devices[d].name.clone()))
                .collect(),
            makespan: Rational::new(span, self.scale),
        }
    }
}

/// Longest job first, each onto the device where it would finish earliest.
///
/// Ties: equal costs go in id order; equal finish times go to the device
/// whose name sorts first.
pub fn greedy_assign(jobs: &[JobSpec], devices: &[DeviceDescriptor]) -> Result<Schedule> {
    let inst = Instance::new(jobs, devices)?;
    let mut order: Vec<usize> = (0..inst.jobs.len()).collect();
    order.sort_by(|&a, &b| inst.jobs[b].cost.0.cmp(&inst.jobs[a].cost.0).then_with(|| inst.jobs[a].id.cmp(&inst.jobs[b].id)));
    let mut loads = vec![0i128; inst.devices.len()];
    let mut choice = vec![0usize; inst.jobs.len()];
    for j in order {
        let (d, finish) = inst.time[j]
            .iter()
            .enumerate()
            .filter_map(|(d, t)| t.map(|t| (d, loads[d] + t)))
            .min_by_key(|&(d, finish)| (finish, d))
            .expect("every job has a feasible device");
        loads[d] = finish;
        choice[j] = d;
    }
    Ok(inst.schedule(&choice, loads.into_iter().max().unwrap_or(0)))
}

/// Exhaustive search for the smallest makespan. Among equally good
/// assignments, returns the first in (job id, device name) order.
pub fn optimal_assign(jobs: &[JobSpec], devices: &[DeviceDescriptor]) -> Result<Schedule> {
    let inst = Instance::new(jobs, devices)?;
    if inst.jobs.len() > OPTIMAL_MAX_JOBS || inst.devices.len() > OPTIMAL_MAX_DEVICES {
        return Err(UpmError::invalid_spec("size"));
    }

    struct Search<'s, 'a> {
        inst: &'s Instance<'a>,
        loads: Vec<i128>,
        choice: Vec<usize>,
        best: Option<(i128, Vec<usize>)>,
    }

    impl Search<'_, '_> {
        fn go(&mut self, j: usize, span: i128) {
            if self.best.as_ref().is_some_and(|(b, _)| span >= *b) {
                return;
            }
            if j == self.inst.jobs.len() {
                self.best = Some((span, self.choice.clone()));
                return;
            }
            for d in 0..self.inst.devices.len() {
                let Some(t) = self.inst.time[j][d] else { continue };
                self.loads[d] += t;
                self.choice[j] = d;
                let next = span.max(self.loads[d]);
                self.go(j + 1, next);
                self.loads[d] -= t;
            }
        }
    }

    let mut search = Search {
        inst: &inst,
        loads: vec![0; inst.devices.len()],
        choice: vec![0; inst.jobs.len()],
        best: None,
    };
    search.go(0, 0);
    let (span, choice) = search.best.expect("feasibility checked");
    Ok(inst.schedule(&choice, span))
}
