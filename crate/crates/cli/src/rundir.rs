//! Output directory bookkeeping and the reproducibility manifest.

use std::path::{Path, PathBuf};

use hdmap_core::formats::FORMAT_VERSION;
use serde::Serialize;

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// A run directory that remembers what was written into it.
pub struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    format_version: u32,
    command: &'a str,
    seed: Option<u64>,
    parallel_feature: bool,
    inputs: Vec<String>,
    outputs: &'a [String],
    config: &'a C,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
        text.push('\n');
        self.write(name, &text)
    }

    /// Writes the manifest last so it lists every other output. The output
    /// directory itself is left out, so identical runs into different
    /// directories produce identical manifests.
    pub fn finish<C: Serialize>(
        mut self,
        command: &str,
        seed: Option<u64>,
        inputs: &[PathBuf],
        config: &C,
    ) -> Result<(), CliError> {
        let outputs = self.outputs.clone();
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            format_version: FORMAT_VERSION,
            command,
            seed,
            parallel_feature: cfg!(feature = "parallel"),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: &outputs,
            config,
        };
        self.write_json(MANIFEST, &manifest)
    }
}
