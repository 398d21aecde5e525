//! Run manifests: `<out>.run.json` next to every command output, listing
//! inputs and outputs with git-style content hashes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the directory holding the run manifest for outputs;
    /// as given on the command line for inputs.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// The effective configuration as `section.field=value` lines.
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_seconds: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `blob <len>\0<content>`, the object hash git uses.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()));
    h.update(content);
    hex(&h.finalize())
}

/// Files hash as blobs; directories hash the sorted `<relpath> <blob>`
/// listing of every file below them.
pub fn path_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            let bytes = fs::read(path.join(&rel)).with_context(|| format!("reading {}", path.join(&rel).display()))?;
            h.update(format!("{} {}\n", rel.replace('\\', "/"), blob_hash(&bytes)));
        }
        Ok(hex(&h.finalize()))
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(blob_hash(&bytes))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("below root").to_string_lossy().into_owned());
        }
    }
    Ok(())
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}

/// Checks `path` against every run manifest that recorded it as an
/// output: the manifest of the path itself and those of its ancestors.
pub fn verify_input(path: &Path) -> Result<String> {
    if !path.exists() {
        bail!("input {} does not exist", path.display());
    }
    let actual = path_hash(path)?;
    let target = fs::canonicalize(path)?;
    for owner in target.ancestors().take(4) {
        let mpath = manifest_path(owner);
        if !mpath.is_file() {
            continue;
        }
        let text = fs::read_to_string(&mpath)?;
        let run: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("run manifest {} is malformed", mpath.display()))?;
        let base = mpath.parent().unwrap_or(Path::new("."));
        for out in &run.outputs {
            let Ok(p) = fs::canonicalize(base.join(&out.path)) else { continue };
            if p == target && out.sha256 != actual {
                bail!(
                    "checksum mismatch for {}: {} recorded {}, found {}",
                    path.display(),
                    mpath.display(),
                    out.sha256,
                    actual
                );
            }
        }
    }
    Ok(actual)
}

/// Collects inputs as they are loaded and writes the manifest once the
/// command has produced its outputs.
pub struct Recorder {
    started: Instant,
    run: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, config: String, seed: u64) -> Self {
        Self {
            started: Instant::now(),
            run: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config,
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_seconds: 0.0,
            },
        }
    }

    /// Verifies and records an input; returns its path for chaining.
    pub fn input<'p>(&mut self, path: &'p Path) -> Result<&'p Path> {
        let sha256 = verify_input(path)?;
        self.run.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(path)
    }

    /// Writes `<out>.run.json` listing `outputs` (files or directories).
    pub fn finish(mut self, out: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let mpath = manifest_path(out);
        let base = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
        let base = fs::canonicalize(if base.as_os_str().is_empty() { Path::new(".") } else { &base })?;
        for p in outputs {
            let abs = fs::canonicalize(p)?;
            let rel = abs.strip_prefix(&base).unwrap_or(&abs);
            self.run.outputs.push(FileHash {
                path: rel.display().to_string(),
                sha256: path_hash(p)?,
            });
        }
        self.run.wall_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.run)?;
        fs::write(&mpath, text).with_context(|| format!("writing {}", mpath.display()))?;
        Ok(mpath)
    }
}
