//! Machine descriptions, their eight-way classification, and the rewrite
//! that turns any of them into a single-core machine plus virtual devices.
//!
//! Three rules apply, always in this order:
//!
//! 1. `STRIP_ACCEL`: every accelerator becomes an EXTERNAL device.
//! 2. `SPLIT_MULTICORE`: every multi-core node contributes a MULTICORE device
//!    and is left with one core.
//! 3. `VIRTUALIZE_CLUSTER`: the nodes become one CLUSTER device and a single
//!    node remains.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::kernels::KERNELSET_V1;
use crate::error::{Result, UpmError};
use crate::model::{DeviceClass, DeviceDescriptor, SpawnSpec, TransportSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceleratorSpec {
    pub kind: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub node_count: u32,
    pub cores_per_cpu: u32,
    #[serde(default)]
    pub accelerators: Vec<AcceleratorSpec>,
    /// Optional per-node core counts; when given they must all equal
    /// `cores_per_cpu`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_cores: Option<Vec<u32>>,
}

impl SystemSpec {
    pub fn new(node_count: u32, cores_per_cpu: u32, accelerators: &[(&str, u32)]) -> SystemSpec {
        SystemSpec {
            node_count,
            cores_per_cpu,
            accelerators: accelerators.iter().map(|(k, c)| AcceleratorSpec { kind: k.to_string(), count: *c }).collect(),
            node_cores: None,
        }
    }

    /// A single single-core CPU.
    pub fn type_one() -> SystemSpec {
        SystemSpec::new(1, 1, &[])
    }

    pub fn from_json(json: &str) -> Result<SystemSpec> {
        serde_json::from_str(json).map_err(|e| UpmError::invalid_spec(format!("parse: {e}")))
    }

    pub fn accelerator_total(&self) -> u64 {
        self.accelerators.iter().map(|a| u64::from(a.count)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SystemType {
    I,
    IPlus,
    II,
    IIPlus,
    III,
    IIIPlus,
    IV,
    IVPlus,
}

impl SystemType {
    pub const ALL: [SystemType; 8] = [
        SystemType::I,
        SystemType::IPlus,
        SystemType::II,
        SystemType::IIPlus,
        SystemType::III,
        SystemType::IIIPlus,
        SystemType::IV,
        SystemType::IVPlus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemType::I => "I",
            SystemType::IPlus => "I_PLUS",
            SystemType::II => "II",
            SystemType::IIPlus => "II_PLUS",
            SystemType::III => "III",
            SystemType::IIIPlus => "III_PLUS",
            SystemType::IV => "IV",
            SystemType::IVPlus => "IV_PLUS",
        }
    }

    pub fn has_accelerators(self) -> bool {
        matches!(self, SystemType::IPlus | SystemType::IIPlus | SystemType::IIIPlus | SystemType::IVPlus)
    }

    fn without_accelerators(self) -> SystemType {
        match self {
            SystemType::IPlus => SystemType::I,
            SystemType::IIPlus => SystemType::II,
            SystemType::IIIPlus => SystemType::III,
            SystemType::IVPlus => SystemType::IV,
            other => other,
        }
    }
}

impl fmt::Display for SystemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    StripAccel,
    SplitMulticore,
    VirtualizeCluster,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::StripAccel => "STRIP_ACCEL",
            Rule::SplitMulticore => "SPLIT_MULTICORE",
            Rule::VirtualizeCluster => "VIRTUALIZE_CLUSTER",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReductionStep {
    pub rule: Rule,
    pub before: SystemType,
    pub after: SystemType,
    pub virtualized: Vec<DeviceDescriptor>,
}

/// What a program sees after reduction: one single-core CPU and devices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpmView {
    pub base: SystemSpec,
    pub devices: Vec<DeviceDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reduction {
    pub original: SystemType,
    pub view: UpmView,
    pub trace: Vec<ReductionStep>,
}

fn is_kind_name(kind: &str) -> bool {
    !kind.is_empty() && kind.len() <= 48 && kind.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub fn validate(s: &SystemSpec) -> Result<()> {
    if s.node_count < 1 {
        return Err(UpmError::invalid_spec("node_count"));
    }
    if s.cores_per_cpu < 1 {
        return Err(UpmError::invalid_spec("cores_per_cpu"));
    }
    for a in &s.accelerators {
        if !is_kind_name(&a.kind) {
            return Err(UpmError::invalid_spec("accelerators.kind"));
        }
        if a.count < 1 {
            return Err(UpmError::invalid_spec("accelerators.count"));
        }
    }
    if let Some(cores) = &s.node_cores {
        if cores.len() != s.node_count as usize || cores.iter().any(|&c| c != s.cores_per_cpu) {
            return Err(UpmError::invalid_spec("node_cores"));
        }
    }
    Ok(())
}

pub fn classify(s: &SystemSpec) -> Result<SystemType> {
    validate(s)?;
    let base = match (s.node_count > 1, s.cores_per_cpu > 1) {
        (false, false) => SystemType::I,
        (false, true) => SystemType::II,
        (true, false) => SystemType::III,
        (true, true) => SystemType::IV,
    };
    Ok(if s.accelerators.is_empty() {
        base
    } else {
        match base {
            SystemType::I => SystemType::IPlus,
            SystemType::II => SystemType::IIPlus,
            SystemType::III => SystemType::IIIPlus,
            _ => SystemType::IVPlus,
        }
    })
}

fn kernelset_device(name: String, class: DeviceClass, transport: TransportSpec) -> DeviceDescriptor {
    DeviceDescriptor::new(name, class, KERNELSET_V1, transport).with_language(KERNELSET_V1)
}

pub fn reduce(s: &SystemSpec) -> Result<Reduction> {
    let original = classify(s)?;
    let mut current = s.clone();
    let mut kind = original;
    let mut trace = Vec::new();
    let mut devices = Vec::new();
    let mut push = |trace: &mut Vec<ReductionStep>, rule, before, after, virtualized: Vec<DeviceDescriptor>| {
        devices.extend(virtualized.iter().cloned());
        trace.push(ReductionStep { rule, before, after, virtualized });
    };

    if !current.accelerators.is_empty() {
        let mut per_kind: BTreeMap<&str, u32> = BTreeMap::new();
        let mut virtualized = Vec::new();
        for a in &current.accelerators {
            for _ in 0..a.count {
                let index = per_kind.entry(&a.kind).or_insert(0);
                let transport = TransportSpec::Spawn(SpawnSpec { command: vec![format!("upm-{}-plugin", a.kind)], ranks: None });
                virtualized.push(
                    DeviceDescriptor::new(format!("accel:{}{}", a.kind, index), DeviceClass::External, &a.kind, transport)
                        .with_language(&a.kind),
                );
                *index += 1;
            }
        }
        current.accelerators.clear();
        let after = kind.without_accelerators();
        push(&mut trace, Rule::StripAccel, kind, after, virtualized);
        kind = after;
    }

    let mut node_devices = Vec::new();
    if current.cores_per_cpu > 1 {
        let cores = current.cores_per_cpu;
        let virtualized: Vec<DeviceDescriptor> = (0..current.node_count)
            .map(|i| {
                kernelset_device(format!("multicore:node{i}[{cores}]"), DeviceClass::Multicore, TransportSpec::Inproc)
                    .with_param("workers", cores.to_string())
            })
            .collect();
        node_devices = virtualized.iter().map(|d| d.name.clone()).collect();
        current.cores_per_cpu = 1;
        current.node_cores = current.node_cores.take().map(|c| vec![1; c.len()]);
        let after = if current.node_count > 1 { SystemType::III } else { SystemType::I };
        push(&mut trace, Rule::SplitMulticore, kind, after, virtualized);
        kind = after;
    }

    if current.node_count > 1 {
        let n = current.node_count;
        let transport = TransportSpec::Spawn(SpawnSpec { command: vec!["upm-worker".into()], ranks: Some(n) });
        let mut cluster = kernelset_device(format!("cluster:all[{n}]"), DeviceClass::Cluster, transport);
        if !node_devices.is_empty() {
            cluster = cluster.with_param("nodes", node_devices.join(","));
        }
        current.node_count = 1;
        current.node_cores = current.node_cores.take().map(|_| vec![1]);
        push(&mut trace, Rule::VirtualizeCluster, kind, SystemType::I, vec![cluster]);
    }

    Ok(Reduction { original, view: UpmView { base: current, devices }, trace })
}

fn device_line(d: &DeviceDescriptor) -> String {
    let mut detail: Vec<String> = Vec::new();
    if let TransportSpec::Spawn(s) = &d.transport {
        detail.push(format!("command={}", s.command.join(" ")));
        if let Some(r) = s.ranks {
            detail.push(format!("ranks={r}"));
        }
    }
    detail.extend(d.params.iter().map(|(k, v)| format!("{k}={v}")));
    format!("{}\t{}\t{}\t{}", d.name, d.class, d.model_id, detail.join(" "))
}

/// Line-oriented rendering: a header, one line per device, then (with
/// `trace`) one line per step.
pub fn render(r: &Reduction, trace: bool) -> String {
    let mut out = format!("type={} devices={}\n", r.original, r.view.devices.len());
    for d in &r.view.devices {
        out.push_str(&device_line(d));
        out.push('\n');
    }
    if trace {
        for (i, step) in r.trace.iter().enumerate() {
            let names: Vec<&str> = step.virtualized.iter().map(|d| d.name.as_str()).collect();
            out.push_str(&format!("step {} {} {} -> {}\t{}\n", i + 1, step.rule, step.before, step.after, names.join(" ")));
        }
    }
    out
}
