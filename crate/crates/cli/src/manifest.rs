//! Output staging: every file of a run is built in memory first, then
//! written atomically together with a manifest describing the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use taxocascade::io::{checksum, checksum_file, write_atomic};

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct InputRef {
    pub file: String,
    pub checksum: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: Option<u64>,
    threads: u32,
    config: &'a serde_json::Value,
    config_checksum: String,
    inputs: &'a BTreeMap<String, InputRef>,
    outputs: BTreeMap<String, String>,
}

pub struct Run {
    command: &'static str,
    out_dir: PathBuf,
    seed: Option<u64>,
    threads: u32,
    config: serde_json::Value,
    inputs: BTreeMap<String, InputRef>,
    outputs: Vec<(String, Vec<u8>)>,
}

impl Run {
    pub fn new(command: &'static str, out_dir: &Path, seed: Option<u64>, threads: u32) -> Self {
        Run {
            command,
            out_dir: out_dir.to_owned(),
            seed,
            threads,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    /// Records an input by role. Only the file name enters the manifest, so
    /// the same inputs in another directory give the same manifest.
    pub fn input(&mut self, role: impl Into<String>, path: &Path) -> Result<(), CliError> {
        let file = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let checksum = checksum_file(path)?;
        self.inputs.insert(role.into(), InputRef { file, checksum });
        Ok(())
    }

    /// The effective configuration after defaults, config files and flags.
    pub fn config(&mut self, config: impl Serialize) -> Result<(), CliError> {
        self.config = serde_json::to_value(config).map_err(taxocascade::Error::from)?;
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.outputs.push((name.into(), contents.into()));
    }

    /// Writes every staged output, then the manifest last.
    pub fn finish(self) -> Result<(), CliError> {
        let config_text = serde_json::to_string(&self.config).map_err(taxocascade::Error::from)?;
        let manifest = Manifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            threads: self.threads,
            config: &self.config,
            config_checksum: checksum(config_text.as_bytes()),
            inputs: &self.inputs,
            outputs: self.outputs.iter().map(|(n, c)| (n.clone(), checksum(c))).collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(taxocascade::Error::from)?;
        text.push('\n');
        for (name, contents) in &self.outputs {
            write_atomic(&self.out_dir.join(name), contents)?;
        }
        write_atomic(&self.out_dir.join(format!("{}.manifest.json", self.command)), text.as_bytes())?;
        Ok(())
    }
}
