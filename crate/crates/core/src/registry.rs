//! The installation interface: manifests in, validated descriptors out, the
//! installed set persisted as one JSON file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use crate::error::{Result, UpmError};
use crate::model::{validate_descriptor, DeviceDescriptor};

/// Environment variable overriding the registry file location.
pub const REGISTRY_ENV: &str = "UPM_REGISTRY";

/// Parses a manifest (a JSON object with exactly the descriptor fields) and
/// validates it.
pub fn parse_manifest(json: &str) -> Result<DeviceDescriptor> {
    let d: DeviceDescriptor = serde_json::from_str(json)
        .map_err(|e| UpmError::InvalidManifest(format!("parse: {e}")))?;
    validate_descriptor(&d)?;
    Ok(d)
}

#[derive(Debug)]
pub struct Registry {
    storage_path: PathBuf,
    installed: RwLock<BTreeMap<String, DeviceDescriptor>>,
    // Serializes mutations; readers only take `installed`.
    write_lock: Mutex<()>,
}

impl Registry {
    /// Opens the registry stored at `path`. A missing file is an empty registry.
    pub fn open(path: impl Into<PathBuf>) -> Result<Registry> {
        let storage_path = path.into();
        let installed = load(&storage_path)?;
        Ok(Registry { storage_path, installed: RwLock::new(installed), write_lock: Mutex::new(()) })
    }

    pub fn storage_path(&self) -> &Path {
        &self.storage_path
    }

    pub fn install(&self, manifest: &str) -> Result<DeviceDescriptor> {
        let d = parse_manifest(manifest)?;
        self.install_descriptor(d)
    }

    pub fn install_descriptor(&self, d: DeviceDescriptor) -> Result<DeviceDescriptor> {
        validate_descriptor(&d)?;
        let _guard = self.write_lock.lock().unwrap();
        let mut next = self.installed.read().unwrap().clone();
        if next.contains_key(&d.name) {
            return Err(UpmError::AlreadyInstalled(d.name));
        }
        next.insert(d.name.clone(), d.clone());
        self.commit(next)?;
        Ok(d)
    }

    pub fn uninstall(&self, name: &str) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap();
        let mut next = self.installed.read().unwrap().clone();
        if next.remove(name).is_none() {
            return Err(UpmError::NotInstalled(name.to_string()));
        }
        self.commit(next)
    }

    pub fn lookup(&self, name: &str) -> Result<DeviceDescriptor> {
        self.installed
            .read()
            .unwrap()
            .get(name)
            .cloned()
            .ok_or_else(|| UpmError::NotInstalled(name.to_string()))
    }

    /// Installed descriptors sorted by name.
    pub fn list(&self) -> Vec<DeviceDescriptor> {
        self.installed.read().unwrap().values().cloned().collect()
    }

    /// Persists first, then publishes to readers.
    fn commit(&self, next: BTreeMap<String, DeviceDescriptor>) -> Result<()> {
        store(&self.storage_path, &next)?;
        *self.installed.write().unwrap() = next;
        Ok(())
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> UpmError {
    UpmError::backend(format!("registry {}: {e}", path.display()))
}

fn load(path: &Path) -> Result<BTreeMap<String, DeviceDescriptor>> {
    let text = match fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(io_failure(path, e)),
    };
    let list: Vec<DeviceDescriptor> = serde_json::from_str(&text)
        .map_err(|e| UpmError::InvalidManifest(format!("registry file: {e}")))?;
    let mut map = BTreeMap::new();
    for d in list {
        validate_descriptor(&d)?;
        if map.contains_key(&d.name) {
            return Err(UpmError::AlreadyInstalled(d.name));
        }
        map.insert(d.name.clone(), d);
    }
    Ok(map)
}

fn store(path: &Path, map: &BTreeMap<String, DeviceDescriptor>) -> Result<()> {
    let list: Vec<&DeviceDescriptor> = map.values().collect();
    let mut json = serde_json::to_string_pretty(&list).expect("descriptors serialize");
    json.push('\n');
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_failure(path, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(path, e))?;
    tmp.write_all(json.as_bytes()).map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e))?;
    Ok(())
}
