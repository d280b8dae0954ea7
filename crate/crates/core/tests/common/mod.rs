#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::Rng;
use tempfile::TempDir;
use upm_core::model::{SpawnSpec, TransportSpec};
use upm_core::{DeviceClass, DeviceDescriptor, Registry, Runtime};

pub const WORKER: &str = env!("CARGO_BIN_EXE_upm-worker");
pub const PLUGIN: &str = env!("CARGO_BIN_EXE_upm-echo-plugin");
pub const UPM: &str = env!("CARGO_BIN_EXE_upm");

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// A runtime over a fresh registry in a temporary directory.
pub struct Sandbox {
    pub dir: TempDir,
    pub registry: Arc<Registry>,
    pub rt: Runtime,
}

impl Sandbox {
    pub fn new() -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        let registry = Arc::new(Registry::open(dir.path().join("registry.json")).unwrap());
        let rt = Runtime::new(registry.clone());
        Sandbox { dir, registry, rt }
    }

    pub fn with(devices: impl IntoIterator<Item = DeviceDescriptor>) -> Sandbox {
        let s = Sandbox::new();
        for d in devices {
            s.registry.install_descriptor(d).unwrap();
        }
        s
    }

    pub fn registry_path(&self) -> PathBuf {
        self.registry.storage_path().to_path_buf()
    }
}

pub fn echo(name: &str, model: &str) -> DeviceDescriptor {
    DeviceDescriptor::new(name, DeviceClass::Echo, model, TransportSpec::Inproc).with_language("kernelset-v1")
}

pub fn multicore(name: &str, model: &str, workers: u32) -> DeviceDescriptor {
    DeviceDescriptor::new(name, DeviceClass::Multicore, model, TransportSpec::Inproc)
        .with_language("kernelset-v1")
        .with_param("workers", workers.to_string())
}

pub fn cluster(name: &str, model: &str, ranks: u32) -> DeviceDescriptor {
    DeviceDescriptor::new(
        name,
        DeviceClass::Cluster,
        model,
        TransportSpec::Spawn(SpawnSpec { command: vec![WORKER.into()], ranks: Some(ranks) }),
    )
    .with_language("kernelset-v1")
}

pub fn plugin(name: &str, model: &str, extra: &[&str]) -> DeviceDescriptor {
    let mut command = vec![PLUGIN.to_string(), "--model".into(), model.into()];
    command.extend(extra.iter().map(|s| s.to_string()));
    DeviceDescriptor::new(name, DeviceClass::External, model, TransportSpec::Spawn(SpawnSpec { command, ranks: None }))
        .with_language(model)
}

// Independent oracles for the built-in kernels.

pub fn oracle(kernel: &str, payload: &[u8]) -> Option<Vec<u8>> {
    match kernel {
        "echo" => Some(payload.to_vec()),
        "vecsum64" => oracle_vecsum(payload),
        "sortu32" => oracle_sort(payload),
        "wordcount" => oracle_wordcount(payload),
        _ => None,
    }
}

/// Left-to-right sums of 4096-element blocks, then of the block sums.
pub fn oracle_vecsum(payload: &[u8]) -> Option<Vec<u8>> {
    if !payload.len().is_multiple_of(8) {
        return None;
    }
    let values: Vec<f64> = payload.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut total = 0.0;
    let mut i = 0;
    while i < values.len() {
        let end = (i + 4096).min(values.len());
        let mut block = 0.0;
        for v in &values[i..end] {
            block += v;
        }
        total += block;
        i = end;
    }
    Some(total.to_le_bytes().to_vec())
}

pub fn oracle_sort(payload: &[u8]) -> Option<Vec<u8>> {
    if !payload.len().is_multiple_of(4) {
        return None;
    }
    let mut v: Vec<u32> = payload.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    v.sort();
    Some(v.into_iter().flat_map(u32::to_le_bytes).collect())
}

pub fn oracle_wordcount(payload: &[u8]) -> Option<Vec<u8>> {
    let text = std::str::from_utf8(payload).ok()?;
    let mut count = 0u64;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            count += 1;
        }
    }
    Some(count.to_le_bytes().to_vec())
}

pub fn f64s(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn u32s(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// `delayecho` payload: sleep `ms`, then echo `body`.
pub fn delayed(ms: u32, body: &[u8]) -> Vec<u8> {
    let mut p = ms.to_le_bytes().to_vec();
    p.extend_from_slice(body);
    p
}

/// A valid random payload for `kernel`; sizes cross shard and block boundaries.
pub fn random_payload(kernel: &str, rng: &mut StdRng) -> Vec<u8> {
    match kernel {
        "echo" => {
            let n = rng.gen_range(0..3000);
            (0..n).map(|_| rng.gen()).collect()
        }
        "vecsum64" => {
            let n = if rng.gen_bool(0.2) { rng.gen_range(4000..13000) } else { rng.gen_range(0..600) };
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1e6..1e6) * 10f64.powi(rng.gen_range(-8..8))).collect();
            f64s(&values)
        }
        "sortu32" => {
            let n = rng.gen_range(0..2500);
            let span = if rng.gen_bool(0.5) { 16 } else { u32::MAX };
            let values: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=span)).collect();
            u32s(&values)
        }
        "wordcount" => {
            const PIECES: &[&str] = &["a", "word", "é", "naïve", "日本", " ", "  ", "\n", "\t", "\u{3000}", "\u{a0}", "x"];
            let n = rng.gen_range(0..800);
            (0..n).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect::<String>().into_bytes()
        }
        other => panic!("no generator for {other}"),
    }
}

pub const KERNELS: [&str; 4] = ["echo", "vecsum64", "sortu32", "wordcount"];
