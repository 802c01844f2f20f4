//! Run manifests and content hashes.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_json, write_json};
use crate::Failure;

/// File name of the manifest in every output directory.
pub const MANIFEST: &str = "manifest.json";

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand.
    pub command: String,
    /// Configuration file, when given.
    pub config_path: Option<String>,
    /// Input role → (path, sha256).
    pub inputs: BTreeMap<String, (String, String)>,
    /// Seed.
    pub seed: u64,
    /// Tool version.
    pub tool_version: String,
    /// Hash of command, seed, configuration and input hashes.
    pub content_hash: String,
    /// Output file → sha256.
    pub artifacts: BTreeMap<String, String>,
    /// Design columns were ignored.
    pub no_design: bool,
    /// Start time, seconds since the Unix epoch.
    pub started: u64,
    /// End time, seconds since the Unix epoch.
    pub finished: u64,
}

/// Hex sha256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex sha256 of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    /// Starts a manifest; `settings` is any serialized configuration affecting outputs.
    pub fn begin(command: &str, config_path: Option<&Path>, inputs: &[(&str, &Path)], seed: u64, settings: &str, no_design: bool) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (role, p) in inputs {
            map.insert((*role).to_string(), (p.display().to_string(), file_hash(p)?));
        }
        let mut h = format!("{command}\n{seed}\n{settings}\n{no_design}\n");
        for (role, (_, hash)) in &map {
            h.push_str(&format!("{role}:{hash}\n"));
        }
        Ok(Self {
            command: command.into(),
            config_path: config_path.map(|p| p.display().to_string()),
            inputs: map,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            content_hash: sha256_hex(h.as_bytes()),
            artifacts: BTreeMap::new(),
            no_design,
            started: now(),
            finished: 0,
        })
    }

    /// Records artifact hashes and writes the manifest into `dir`.
    pub fn finish(mut self, dir: &Path, artifacts: &[&str]) -> Result<Self> {
        for a in artifacts {
            self.artifacts.insert((*a).to_string(), file_hash(&dir.join(a))?);
        }
        self.finished = now();
        write_json(&dir.join(MANIFEST), &self)?;
        Ok(self)
    }

    /// Loads the manifest of a previous run.
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }

    /// Checks that listed artifacts in `dir` still match their recorded hashes.
    pub fn verify_artifacts(&self, dir: &Path, names: &[&str], force: bool) -> Result<()> {
        for n in names {
            let want = self
                .artifacts
                .get(*n)
                .ok_or_else(|| Failure::schema(format!("{n} is not listed in {}", dir.join(MANIFEST).display())))?;
            let got = file_hash(&dir.join(n))?;
            if &got != want && !force {
                return Err(Failure::schema(format!("{} does not match its manifest hash (use --force to override)", dir.join(n).display())).into());
            }
        }
        Ok(())
    }

    /// Checks that an input file matches the hash recorded under `role`.
    pub fn verify_input(&self, role: &str, path: &Path, force: bool) -> Result<()> {
        if let Some((_, want)) = self.inputs.get(role) {
            if &file_hash(path)? != want && !force {
                return Err(Failure::schema(format!("{} differs from the {role} used by the upstream run (use --force to override)", path.display())).into());
            }
        }
        Ok(())
    }
}
