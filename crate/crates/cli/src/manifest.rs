//! Run manifests: everything needed to repeat a run.

use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use crate::error::CliError;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub struct Run {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub seed: u64,
    pub seed_source: &'static str,
    started: Instant,
}

impl Run {
    pub fn start(command: &'static str, argv: Vec<String>, seed: Option<u64>) -> Self {
        let (seed, seed_source) = match seed {
            Some(s) => (s, "flag"),
            // 53 bits so the seed survives any JSON reader
            None => (rand::random::<u64>() >> 11, "drawn"),
        };
        Self {
            command,
            argv,
            seed,
            seed_source,
            started: Instant::now(),
        }
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.started.elapsed().as_secs_f64() * 1e3
    }

    /// Recorded arguments with the seed pinned.
    fn replay_argv(&self) -> Vec<String> {
        let mut out = self.argv.clone();
        if self.seed_source == "drawn" {
            out.push("--seed".into());
            out.push(self.seed.to_string());
        }
        out
    }

    pub fn write(&self, dir: &Path, config: Value, results: Value, timings: Value, outputs: &[&str]) -> Result<(), CliError> {
        let mut timings = timings;
        timings["total"] = json!(self.elapsed_ms());
        let manifest = json!({
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "tool": "shapcam",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "argv": self.argv,
            "replay_argv": self.replay_argv(),
            "seed": self.seed,
            "seed_source": self.seed_source,
            "config": config,
            "results": results,
            "timings_ms": timings,
            "outputs": outputs,
        });
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

pub fn replay_argv(path: &Path) -> Result<Vec<String>, CliError> {
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    manifest["replay_argv"]
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_str().map(String::from)).collect())
        .ok_or_else(|| CliError::usage(format!("{} has no replay_argv", path.display())))
}
