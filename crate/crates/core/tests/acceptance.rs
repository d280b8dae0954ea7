//! Acceptance suite: one PASS/FAIL line per criterion, each with a pinned
//! wall-clock limit. Runs without the libtest harness so the lines are
//! always printed.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use upm_core::backends::minimp::connection_log;
use upm_core::coupler::{CouplingState, CouplingTopology, Coordinator};
use upm_core::reducer::{self, SystemSpec, SystemType};
use upm_core::scheduler::{self, JobSpec};
use upm_core::{decode_frame, encode_frame, DeviceDescriptor, Frame, FrameKind, Rational, UpmError};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const SEED: u64 = 0x5eed_2026;

// Framing

/// Bitwise reflected CRC-32 (polynomial 0xEDB88320).
fn reference_crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            crc = if crc & 1 == 1 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
        }
    }
    !crc
}

const KINDS: [FrameKind; 6] =
    [FrameKind::Hello, FrameKind::Request, FrameKind::Response, FrameKind::Error, FrameKind::Control, FrameKind::Bye];

fn random_frame(rng: &mut StdRng) -> Frame {
    let device: String = (0..rng.gen_range(0..24)).map(|_| rng.gen::<char>()).collect();
    let len = if rng.gen_bool(0.02) { rng.gen_range(0..70_000) } else { rng.gen_range(0..512) };
    let mut payload = vec![0u8; len];
    rng.fill(payload.as_mut_slice());
    Frame::new(KINDS[rng.gen_range(0..KINDS.len())], rng.gen(), device, payload)
}

fn framing() -> Outcome {
    let mut golden = vec![0x55, 0x50, 0x4D, 0x31, 0x01, 0x02];
    golden.extend(1u64.to_le_bytes());
    golden.extend([0x04, 0x00]);
    golden.extend(b"echo");
    golden.extend(2u32.to_le_bytes());
    golden.extend(b"hi");
    let crc = reference_crc32(&golden[4..]);
    ensure!(crc == 0xC5F6_B86B, "reference CRC drifted: {crc:#010x}");
    golden.extend(crc.to_le_bytes());
    let request = Frame::new(FrameKind::Request, 1, "echo", "hi");
    ensure!(encode_frame(&request) == golden, "golden REQUEST bytes differ");
    ensure!(decode_frame(&golden) == Ok((request, golden.len())), "golden REQUEST does not decode");
    let bye = encode_frame(&Frame::bye());
    ensure!(bye.len() == 24 && reference_crc32(&bye[4..20]).to_le_bytes() == bye[20..], "BYE layout");

    let mut rng = StdRng::seed_from_u64(SEED);
    let cases = 1500;
    let mut truncations = 0;
    for i in 0..cases {
        let f = random_frame(&mut rng);
        let bytes = encode_frame(&f);
        ensure!(decode_frame(&bytes) == Ok((f.clone(), bytes.len())), "round trip {i}");

        let g = random_frame(&mut rng);
        let mut joined = bytes.clone();
        joined.extend(encode_frame(&g));
        let (first, used) = decode_frame(&joined).map_err(|e| format!("concat {i}: {e}"))?;
        ensure!(first == f && used == bytes.len(), "concat first {i}");
        ensure!(decode_frame(&joined[used..]).map(|(x, _)| x) == Ok(g), "concat second {i}");

        let mut bad = bytes.clone();
        let at = bytes.len() - 1 - rng.gen_range(0..4);
        bad[at] ^= 1 << rng.gen_range(0..8);
        ensure!(decode_frame(&bad) == Err(UpmError::protocol("crc")), "flipped CRC bit accepted ({i})");
        if !f.payload.is_empty() {
            let mut bad = bytes.clone();
            let at = bytes.len() - 5 - rng.gen_range(0..f.payload.len());
            bad[at] ^= 0x80;
            ensure!(decode_frame(&bad) == Err(UpmError::protocol("crc")), "flipped payload bit accepted ({i})");
        }
        if i % 25 == 0 && bytes.len() < 4096 {
            for cut in 0..bytes.len() {
                ensure!(decode_frame(&bytes[..cut]) == Err(UpmError::protocol("truncated")), "prefix {cut} of frame {i}");
                truncations += 1;
            }
        }
    }
    let mut wrong = golden.clone();
    wrong[0] = b'X';
    ensure!(decode_frame(&wrong) == Err(UpmError::protocol("magic")), "bad magic accepted");
    Ok(format!("{cases} round trips, {truncations} truncations rejected"))
}

// Backend equivalence

fn backend_equivalence() -> Outcome {
    let mut devices = vec![];
    for k in KERNELS {
        devices.push(echo(&format!("ref-{k}"), k));
        devices.push(plugin(&format!("plug-{k}"), k, &[]));
    }
    for w in [1, 2, 8] {
        devices.push(multicore(&format!("pool{w}"), "kernelset-v1", w));
    }
    for r in [1, 2, 4] {
        devices.push(cluster(&format!("grid{r}"), "kernelset-v1", r));
    }
    let s = Sandbox::with(devices);
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut jobs = 0;
    for k in KERNELS {
        let payloads: Vec<Vec<u8>> = (0..100).map(|_| random_payload(k, &mut rng)).collect();
        let mut paths = vec![format!("upm://ref-{k}"), format!("upm://plug-{k}")];
        paths.extend([1, 2, 8].map(|w| format!("upm://pool{w}?model={k}")));
        paths.extend([1, 2, 4].map(|r| format!("upm://grid{r}?model={k}")));
        let mut outputs: Vec<Vec<Vec<u8>>> = vec![];
        for path in &paths {
            let mut h = s.rt.open(path).map_err(|e| format!("open {path}: {e}"))?;
            for p in &payloads {
                h.write(p).map_err(|e| format!("{path}: {e}"))?;
            }
            let mut out = vec![];
            for _ in &payloads {
                out.push(h.read(Some(Duration::from_secs(30))).map_err(|e| format!("{path}: {e}"))?);
            }
            jobs += payloads.len();
            outputs.push(out);
        }
        for (i, p) in payloads.iter().enumerate() {
            let expected = oracle(k, p).expect("valid payload");
            ensure!(outputs[0][i] == expected, "{k} payload {i}: reference path disagrees with oracle");
            for (path, out) in paths.iter().zip(&outputs).skip(1) {
                ensure!(out[i] == outputs[0][i], "{k} payload {i}: {path} differs from reference");
            }
        }
    }

    let big = f64s(&(0..100_000).map(|_| rng.gen_range(-1e3..1e3)).collect::<Vec<f64>>());
    let mut sums = BTreeMap::new();
    for path in ["upm://ref-vecsum64", "upm://pool1?model=vecsum64", "upm://pool2?model=vecsum64", "upm://pool8?model=vecsum64",
                 "upm://grid1?model=vecsum64", "upm://grid2?model=vecsum64", "upm://grid4?model=vecsum64"] {
        let mut h = s.rt.open(path).map_err(|e| e.to_string())?;
        h.write(&big).map_err(|e| e.to_string())?;
        sums.insert(path, h.read(None).map_err(|e| e.to_string())?);
    }
    let first = sums.values().next().cloned();
    ensure!(sums.values().all(|v| Some(v) == first.as_ref()), "vecsum64 depends on worker/rank count: {sums:?}");
    Ok(format!("{jobs} jobs over 8 device configurations, vecsum64 stable over 1/2/8 workers and 1/2/4 ranks"))
}

// File API

fn file_api() -> Outcome {
    let s = Sandbox::with([
        echo("echo0", "echo"),
        multicore("pool", "kernelset-v1", 4),
        cluster("grid", "kernelset-v1", 2),
        plugin("plug", "echo", &[]),
        multicore("slow-pool", "delayecho", 4),
        cluster("slow-grid", "delayecho", 2),
        plugin("slow-plug", "delayecho", &[]),
    ]);
    let mut rng = StdRng::seed_from_u64(SEED);
    let targets = ["upm://echo0", "upm://pool?model=echo", "upm://grid?model=echo", "upm://plug"];
    for path in targets {
        let mut h = s.rt.open(path).map_err(|e| format!("{path}: {e}"))?;
        for i in 0..40 {
            let len = [0, 1, 7, 4096, 65_536, rng.gen_range(0..20_000)][i % 6];
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            h.write(&payload).map_err(|e| e.to_string())?;
            ensure!(h.read(None).map_err(|e| e.to_string())? == payload, "{path}: round trip of {len} bytes");
        }
        h.close();
        ensure!(h.write(b"x") == Err(UpmError::DeviceClosed), "{path}: write after close");
        ensure!(h.read(None) == Err(UpmError::DeviceClosed), "{path}: read after close");
        ensure!(h.control("flush") == Err(UpmError::DeviceClosed), "{path}: control after close");
    }

    for path in ["upm://slow-pool", "upm://slow-grid", "upm://slow-plug"] {
        let mut h = s.rt.open(path).map_err(|e| format!("{path}: {e}"))?;
        let delays: Vec<u32> = (0..12).map(|i| if i % 3 == 0 { 120 - i * 8 } else { rng.gen_range(0..15) }).collect();
        for (i, ms) in delays.iter().enumerate() {
            h.write(&delayed(*ms, &[i as u8])).map_err(|e| e.to_string())?;
        }
        for i in 0..delays.len() {
            let (id, out) = h.read_with_id(None).map_err(|e| e.to_string())?;
            ensure!(id.0 == i as u64 + 1 && out == [i as u8], "{path}: result {i} out of order ({id}, {out:?})");
        }

        h.write(&delayed(60, b"a")).map_err(|e| e.to_string())?;
        h.write(&delayed(5, b"b")).map_err(|e| e.to_string())?;
        h.control("flush").map_err(|e| e.to_string())?;
        ensure!(h.control("stat").as_deref() == Ok("pending=2 submitted=14"), "{path}: flush consumed results");
        ensure!(h.read(Some(Duration::ZERO)).as_deref() == Ok(&b"a"[..]), "{path}: first flushed result");
        ensure!(h.read(Some(Duration::ZERO)).as_deref() == Ok(&b"b"[..]), "{path}: second flushed result");
    }
    Ok("4 classes round trip, ordering held on 3 classes, close and flush semantics held".into())
}

// Reducer

fn reducer_chains() -> Outcome {
    use SystemType::*;
    let table: [(SystemSpec, Vec<(SystemType, SystemType)>); 8] = [
        (SystemSpec::new(1, 1, &[]), vec![]),
        (SystemSpec::new(1, 1, &[("gpu", 1)]), vec![(IPlus, I)]),
        (SystemSpec::new(1, 8, &[]), vec![(II, I)]),
        (SystemSpec::new(1, 8, &[("gpu", 2)]), vec![(IIPlus, II), (II, I)]),
        (SystemSpec::new(4, 1, &[]), vec![(III, I)]),
        (SystemSpec::new(4, 1, &[("fpga", 1)]), vec![(IIIPlus, III), (III, I)]),
        (SystemSpec::new(4, 8, &[]), vec![(IV, III), (III, I)]),
        (SystemSpec::new(4, 8, &[("gpu", 2)]), vec![(IVPlus, IV), (IV, III), (III, I)]),
    ];
    let mut lengths = vec![];
    for (spec, chain) in &table {
        let r = reducer::reduce(spec).map_err(|e| e.to_string())?;
        let got: Vec<(SystemType, SystemType)> = r.trace.iter().map(|s| (s.before, s.after)).collect();
        ensure!(&got == chain, "{}: chain {got:?}", r.original);
        ensure!(reducer::classify(&r.view.base) == Ok(I), "{}: base not type I", r.original);
        lengths.push(got.len());
    }
    ensure!(lengths == [0, 1, 1, 2, 1, 2, 2, 3], "chain lengths {lengths:?}");

    let mut rng = StdRng::seed_from_u64(SEED);
    let specs = 2000;
    for _ in 0..specs {
        let nodes = if rng.gen_bool(0.3) { 1 } else { rng.gen_range(1..=64) };
        let cores = if rng.gen_bool(0.3) { 1 } else { rng.gen_range(1..=128) };
        let kinds = ["gpu", "fpga", "tpu", "dsp"];
        let accels: Vec<(&str, u32)> =
            kinds[..rng.gen_range(0..=kinds.len())].iter().map(|k| (*k, rng.gen_range(1..=6))).collect();
        let spec = SystemSpec::new(nodes, cores, &accels);
        let r = reducer::reduce(&spec).map_err(|e| e.to_string())?;
        let law = spec.accelerator_total() as usize + if cores > 1 { nodes as usize } else { 0 } + usize::from(nodes > 1);
        ensure!(r.view.devices.len() == law, "device count {} != {law} for {spec:?}", r.view.devices.len());
        ensure!(r.trace.len() <= 3 && reducer::classify(&r.view.base) == Ok(I), "termination for {spec:?}");
    }
    Ok(format!("8 chains exact, device-count law on {specs} specs"))
}

// Scheduler

/// Every mapping in (job id, device name) lexicographic order; the first
/// strictly smallest makespan wins.
fn brute_force(jobs: &[JobSpec], devices: &[DeviceDescriptor]) -> Option<(Rational, BTreeMap<String, String>)> {
    let mut jobs: Vec<&JobSpec> = jobs.iter().collect();
    jobs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut devices: Vec<&DeviceDescriptor> = devices.iter().collect();
    devices.sort_by(|a, b| a.name.cmp(&b.name));
    let total = devices.len().pow(jobs.len() as u32);
    let mut best: Option<(Rational, Vec<usize>)> = None;
    'mapping: for code in 0..total {
        let mut digits = vec![0; jobs.len()];
        let mut c = code;
        for slot in digits.iter_mut().rev() {
            *slot = c % devices.len();
            c /= devices.len();
        }
        let mut loads = vec![Rational::zero(); devices.len()];
        for (j, &d) in jobs.iter().zip(&digits) {
            if !scheduler::feasible(j, devices[d]) {
                continue 'mapping;
            }
            loads[d] = loads[d] + j.cost / devices[d].speed_factor;
        }
        let span = loads.into_iter().fold(Rational::zero(), |a, b| if b.0 > a.0 { b } else { a });
        if best.as_ref().is_none_or(|(b, _)| span.0 < b.0) {
            best = Some((span, digits));
        }
    }
    best.map(|(span, digits)| {
        (span, jobs.iter().zip(digits).map(|(j, d)| (j.id.clone(), devices[d].name.clone())).collect())
    })
}

fn random_instance(rng: &mut StdRng, identical: bool) -> (Vec<JobSpec>, Vec<DeviceDescriptor>) {
    const MODELS: [&str; 3] = ["echo", "sortu32", "vecsum64"];
    let n_dev = rng.gen_range(1..=3);
    let devices = (0..n_dev)
        .map(|i| {
            let model = if identical || rng.gen_bool(0.5) { "kernelset-v1" } else { MODELS[rng.gen_range(0..3)] };
            let mut d = multicore(&format!("dev{i}"), model, 1);
            if !identical {
                d.speed_factor = Rational::new(rng.gen_range(1..=6), rng.gen_range(1..=3));
                if rng.gen_bool(0.3) {
                    d.languages.insert("cuda".into());
                    d.languages.remove("kernelset-v1");
                }
            }
            d
        })
        .collect();
    let jobs = (0..rng.gen_range(1..=6))
        .map(|i| {
            let lang = if identical || rng.gen_bool(0.8) { "kernelset-v1" } else { "cuda" };
            let cost = Rational::new(rng.gen_range(1..=40), rng.gen_range(1..=4));
            JobSpec::new(&format!("job{i}"), MODELS[rng.gen_range(0..3)], lang, cost)
        })
        .collect();
    (jobs, devices)
}

fn scheduler_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(SEED);
    let (mut checked, mut infeasible, mut identical_checked) = (0, 0, 0);
    while checked < 400 {
        let identical = checked % 4 == 0;
        let (jobs, devices) = random_instance(&mut rng, identical);
        let oracle = brute_force(&jobs, &devices);
        let (greedy, optimal) = (scheduler::greedy_assign(&jobs, &devices), scheduler::optimal_assign(&jobs, &devices));
        let Some((span, map)) = oracle else {
            ensure!(matches!(optimal, Err(UpmError::InfeasibleJob(_))), "optimal found a mapping the oracle did not");
            ensure!(matches!(greedy, Err(UpmError::InfeasibleJob(_))), "greedy found a mapping the oracle did not");
            infeasible += 1;
            continue;
        };
        let optimal = optimal.map_err(|e| e.to_string())?;
        let greedy = greedy.map_err(|e| e.to_string())?;
        ensure!(optimal.makespan == span && optimal.assignment == map, "optimal differs from oracle on {jobs:?} / {devices:?}");
        ensure!(scheduler::makespan(&greedy.assignment, &jobs, &devices) == greedy.makespan, "greedy makespan misreported");
        ensure!(greedy.makespan.0 >= span.0, "greedy beat the optimum");
        if identical {
            ensure!(greedy.makespan.0 <= span.0 * 2, "greedy above 2x optimal on identical devices");
            identical_checked += 1;
        }
        let factor = Rational::new(rng.gen_range(1..=30), rng.gen_range(1..=30));
        let scaled: Vec<JobSpec> = jobs.iter().map(|j| JobSpec { cost: j.cost * factor, ..j.clone() }).collect();
        let g2 = scheduler::greedy_assign(&scaled, &devices).map_err(|e| e.to_string())?;
        let o2 = scheduler::optimal_assign(&scaled, &devices).map_err(|e| e.to_string())?;
        ensure!(g2.assignment == greedy.assignment && o2.assignment == optimal.assignment, "scaling by {factor} moved jobs");
        ensure!(o2.makespan == optimal.makespan * factor, "scaled optimum");
        checked += 1;
    }
    Ok(format!("{checked} instances ({identical_checked} identical-speed), {infeasible} infeasible rejected"))
}

// Coupler

fn all_to_all(ids: &[&str], rng: &mut StdRng) -> (Vec<(String, Value)>, BTreeMap<(String, String), Vec<Vec<u8>>>) {
    let mut sent: BTreeMap<(String, String), Vec<Vec<u8>>> = BTreeMap::new();
    let mut scripts = vec![];
    for me in ids {
        let mut script = vec![];
        for _ in 0..100 {
            for peer in ids.iter().filter(|p| *p != me) {
                let payload: Vec<u8> = (0..rng.gen_range(0..48)).map(|_| rng.gen()).collect();
                script.push(json!({"send": {"dst": peer, "tag": "data", "payload": {"hex": hex::encode(&payload)}}}));
                sent.entry((me.to_string(), peer.to_string())).or_default().push(payload);
            }
            for peer in ids.iter().filter(|p| *p != me) {
                script.push(json!({"recv": {"src": peer, "tag": "data"}}));
            }
        }
        script.push(json!("halt"));
        scripts.push((me.to_string(), Value::Array(script)));
    }
    (scripts, sent)
}

fn coupler() -> Outcome {
    let s = Sandbox::with([
        cluster("node-a", "coupled-app", 2),
        cluster("node-b", "coupled-app", 2),
        cluster("node-c", "coupled-app", 2),
        cluster("app-a", "coupled-app", 1),
        cluster("app-b", "coupled-app", 1),
    ]);
    let ids = ["A", "B", "C"];
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut steps = vec![];
    for bound in [1usize, 4] {
        let (scripts, sent) = all_to_all(&ids, &mut rng);
        let apps: Vec<Value> = scripts
            .iter()
            .zip(["node-a", "node-b", "node-c"])
            .map(|((id, script), device)| json!({"app_id": id, "device": device, "script": script}))
            .collect();
        let topology: CouplingTopology =
            serde_json::from_value(json!({"apps": apps, "buffer_bound": bound})).map_err(|e| e.to_string())?;
        let mut c = Coordinator::start(&s.rt, &topology).map_err(|e| e.to_string())?;
        let report = c.run_until_quiescent(100_000);
        ensure!(report.state == CouplingState::Quiescent, "bound {bound}: {}", report.state);
        ensure!(report.channels.len() == 6, "bound {bound}: {} channels", report.channels.len());
        ensure!(report.channels.values().all(|&n| n == 100), "bound {bound}: counts {:?}", report.channels);
        for dst in ids {
            let log = c.received_log(dst).map_err(|e| e.to_string())?;
            for src in ids.iter().filter(|s| **s != dst) {
                let from: Vec<_> = log.iter().filter(|e| e.src == *src).collect();
                let seqs: Vec<u64> = from.iter().map(|e| e.seq).collect();
                ensure!(seqs == (1..=100).collect::<Vec<_>>(), "bound {bound}: {src}->{dst} seq not FIFO/gap-free");
                let payloads: Vec<Vec<u8>> = from.iter().map(|e| e.payload.clone()).collect();
                ensure!(payloads == sent[&(src.to_string(), dst.to_string())], "bound {bound}: {src}->{dst} payloads differ");
            }
        }
        steps.push(report.steps);
        c.shutdown();
    }

    let deadlock = CouplingTopology::from_json(&fs::read_to_string(fixture("deadlock.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut c = Coordinator::start(&s.rt, &deadlock).map_err(|e| e.to_string())?;
    let stalled = c.run_until_quiescent(500);
    ensure!(stalled.state == CouplingState::Stalled && stalled.steps == 500, "deadlock fixture: {}", stalled.state);
    c.shutdown();

    let log = connection_log();
    ensure!(!log.is_empty(), "no connections logged");
    let cross = log.iter().filter(|r| r.is_cross_cluster()).count();
    ensure!(cross == 0, "{cross} inter-cluster connections");
    Ok(format!("all-to-all quiescent in {steps:?} passes for bounds [1, 4], deadlock STALLED, {} rank links, 0 cross-cluster", log.len()))
}

// CLI

fn cli_golden() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let registry = dir.path().join("registry.json");
    let upm = |args: &[&str]| -> Result<String, String> {
        let out = Command::new(UPM)
            .arg("--registry")
            .arg(&registry)
            .args(args)
            .env_remove("RUST_LOG")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "upm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).map_err(|e| e.to_string())
    };
    for m in ["echo0", "pool", "grid", "plug", "app_a", "app_b"] {
        upm(&["install", &fixture(&format!("manifests/{m}.json")).to_string_lossy()])?;
    }
    let f = |name: &str| fixture(name).to_string_lossy().into_owned();
    let runs: [(&str, Vec<String>); 5] = [
        ("reduce_iv_plus.txt", vec!["reduce".into(), "--trace".into(), f("system_iv_plus.json")]),
        ("assign_greedy.txt", vec!["assign".into(), "--jobs".into(), f("jobs.json")]),
        ("assign_optimal.txt", vec!["assign".into(), "--optimal".into(), "--jobs".into(), f("jobs.json")]),
        ("couple_pingpong.txt", vec!["couple".into(), f("pingpong.json")]),
        ("couple_deadlock.txt", vec!["couple".into(), "--max-steps".into(), "30".into(), f("deadlock.json")]),
    ];
    for (golden, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let first = upm(&args)?;
        let second = upm(&args)?;
        ensure!(first == second, "{golden}: output changed between runs");
        let expected = fs::read_to_string(fixture(&format!("golden/{golden}"))).map_err(|e| e.to_string())?;
        ensure!(first == expected, "{golden}: output differs from golden file");
    }
    Ok(format!("{} commands byte-stable over two runs and equal to golden files", runs.len()))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 7] = [
    Criterion { name: "framing golden and round trip", limit: Duration::from_secs(5), run: framing },
    Criterion { name: "backend equivalence", limit: Duration::from_secs(60), run: backend_equivalence },
    Criterion { name: "file API contract", limit: Duration::from_secs(30), run: file_api },
    Criterion { name: "reducer chains and device law", limit: Duration::from_secs(5), run: reducer_chains },
    Criterion { name: "scheduler vs brute force", limit: Duration::from_secs(30), run: scheduler_oracle },
    Criterion { name: "coupler all-to-all", limit: Duration::from_secs(60), run: coupler },
    Criterion { name: "CLI golden files", limit: Duration::from_secs(60), run: cli_golden },
];

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for c in &CRITERIA {
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(_) if elapsed > c.limit => Err(format!("over time limit of {}s", c.limit.as_secs())),
            other => other,
        };
        let (verdict, detail) = match outcome {
            Ok(detail) => ("PASS", detail),
            Err(detail) => {
                failures += 1;
                ("FAIL", detail)
            }
        };
        println!("{verdict} {:<32} {:>7.2}s (limit {:>2}s)  {detail}", c.name, elapsed.as_secs_f64(), c.limit.as_secs());
    }
    println!("acceptance: {} of {} criteria passed", CRITERIA.len() - failures, CRITERIA.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
