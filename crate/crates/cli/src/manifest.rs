//! `manifest.txt`: the inputs that determine a run's outputs, written first.

use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub subcommand: &'static str,
    pub inputs: Vec<(&'static str, String)>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn new(subcommand: &'static str, out: &Path) -> Self {
        Self {
            subcommand,
            inputs: Vec::new(),
            seed: None,
            out: out.to_path_buf(),
        }
    }

    pub fn input(mut self, key: &'static str, value: impl ToString) -> Self {
        self.inputs.push((key, value.to_string()));
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn render(&self) -> String {
        let mut s = format!("subcommand = {}\n", self.subcommand);
        for (k, v) in &self.inputs {
            s.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        s.push_str(&format!("out = {}\n", self.out.display()));
        s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        s
    }

    /// Create the output directory and write the manifest into it.
    pub fn write(&self) -> std::io::Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(MANIFEST_FILE), self.render())
    }
}
