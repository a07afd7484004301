//! Run manifests: the command, its full configuration snapshot and the
//! SHA-256 of every file it read and wrote.
//!
//! ```text
//! weaksig-run-manifest 1
//! command = train
//! tool_version = 0.1.0
//! seed = 7
//! arg.data = corpus/processed
//! config.train.epochs = 40
//! input.processed = <sha256> corpus/processed/processed.bin
//! output.model.ckpt = <sha256>
//! ```
//!
//! Output names are relative to the run's output directory, so a replay
//! into another directory yields the same manifest.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run.manifest";
const MAGIC: &str = "weaksig-run-manifest 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Absent for commands that draw no random numbers.
    pub seed: Option<u64>,
    pub args: Vec<(String, String)>,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn arg(&self, key: &str) -> Result<&str> {
        lookup(&self.args, key).ok_or_else(|| weaksig::Error::Integrity(format!("run manifest lacks arg.{key}")).into())
    }

    /// Config entries under `prefix.`, with the prefix removed.
    pub fn config_section(&self, prefix: &str) -> Vec<(String, String)> {
        let p = format!("{prefix}.");
        self.config
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        lookup(&self.config, key)
            .ok_or_else(|| weaksig::Error::Integrity(format!("run manifest lacks config.{key}")).into())
    }

    pub fn render(&self) -> String {
        let mut s = format!("{MAGIC}\ncommand = {}\ntool_version = {}\n", self.command, self.tool_version);
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        for (k, v) in &self.args {
            s.push_str(&format!("arg.{k} = {v}\n"));
        }
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        for f in &self.inputs {
            s.push_str(&format!("input.{} = {} {}\n", f.role, f.sha256, f.path));
        }
        for f in &self.outputs {
            s.push_str(&format!("output.{} = {}\n", f.name, f.sha256));
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let bad = |n: usize, what: &str| -> anyhow::Error {
            weaksig::Error::Integrity(format!("{source}:{}: {what}", n + 1)).into()
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(MAGIC) {
            return Err(weaksig::Error::Integrity(format!("{source}: not a run manifest")).into());
        }
        let mut m = RunManifest {
            command: String::new(),
            tool_version: String::new(),
            seed: None,
            args: Vec::new(),
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| bad(n, "expected key = value"))?;
            let v = v.to_string();
            if k == "command" {
                m.command = v;
            } else if k == "tool_version" {
                m.tool_version = v;
            } else if k == "seed" {
                m.seed = Some(v.parse().map_err(|_| bad(n, "bad seed"))?);
            } else if let Some(k) = k.strip_prefix("arg.") {
                m.args.push((k.to_string(), v));
            } else if let Some(k) = k.strip_prefix("config.") {
                m.config.push((k.to_string(), v));
            } else if let Some(role) = k.strip_prefix("input.") {
                let (sha, path) = v.split_once(' ').ok_or_else(|| bad(n, "input needs a checksum and a path"))?;
                m.inputs.push(InputFile { role: role.to_string(), path: path.to_string(), sha256: sha.to_string() });
            } else if let Some(name) = k.strip_prefix("output.") {
                m.outputs.push(OutputFile { name: name.to_string(), sha256: v });
            } else {
                return Err(bad(n, &format!("unknown key {k}")));
            }
        }
        if m.command.is_empty() {
            bail!(weaksig::Error::Integrity(format!("{source}: run manifest names no command")));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Compares recorded input checksums against the files on disk.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = sha256_file(Path::new(&f.path)).map_err(|e| anyhow!(weaksig::Error::Integrity(format!("input {} ({}): {e:#}", f.role, f.path))))?;
            if now != f.sha256 {
                bail!(weaksig::Error::Integrity(format!(
                    "input {} ({}) changed since the run: sha256 {now}, recorded {}",
                    f.role, f.path, f.sha256
                )));
            }
        }
        Ok(())
    }
}

fn lookup<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}
