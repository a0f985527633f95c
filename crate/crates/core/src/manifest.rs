//! Run manifests embedded as `# key=value` header lines in results files.

use std::fmt::Write as _;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::config::Config;

/// Version string in `git describe` style when the build environment provides
/// `VARSCAN_GIT_DESCRIBE`, otherwise the package version.
pub fn version_string() -> String {
    match option_env!("VARSCAN_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("varscan {d}"),
        _ => format!("varscan v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Hex SHA-256 of the raw dataset bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<Config>,
    pub dataset: Option<String>,
    pub fingerprint: Option<String>,
    pub version: String,
    pub seed: u64,
    pub timings: Vec<(String, Duration)>,
    /// Extra facts about the run (e.g. which solver produced an order).
    pub notes: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            config: None,
            dataset: None,
            fingerprint: None,
            version: version_string(),
            seed,
            timings: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn time(&mut self, phase: &str, elapsed: Duration) {
        self.timings.push((phase.to_string(), elapsed));
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    /// Header lines, each starting with `# `. Everything except the
    /// `time.*` lines is a pure function of the inputs.
    pub fn header(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| {
            let _ = writeln!(s, "# {k}={v}");
        };
        kv("command", &self.command);
        kv("version", &self.version);
        kv("seed", &self.seed.to_string());
        if let Some(d) = &self.dataset {
            kv("dataset", d);
        }
        if let Some(f) = &self.fingerprint {
            kv("dataset_sha256", f);
        }
        for (k, v) in &self.notes {
            kv(k, v);
        }
        if let Some(cfg) = &self.config {
            for line in cfg.to_text().lines() {
                if let Some((k, v)) = line.split_once('=') {
                    kv(&format!("config.{k}"), v);
                }
            }
        }
        for (phase, d) in &self.timings {
            kv(&format!("time.{phase}_s"), &format!("{:.3}", d.as_secs_f64()));
        }
        s
    }
}

/// Reads the `# key=value` lines at the top of a results file.
pub fn parse_header(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map_while(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Rebuilds the config recorded under `config.*` keys.
pub fn config_from_header(entries: &[(String, String)]) -> crate::Result<Config> {
    let text: String = entries
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k}={v}\n")))
        .collect();
    Config::parse(&text)
}
