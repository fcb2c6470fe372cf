use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use organpp::nifti::{encode, wants_gzip, NiftiImage};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{CliError, CliResult};

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".organpp-")
        .tempfile_in(dir)
        .map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(organpp::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_image(path: &Path, image: &NiftiImage) -> CliResult<()> {
    let bytes = encode(image, wants_gzip(path))?;
    write_atomic(path, &bytes)
}

/// Collects what went into a run and how long each stage took.
pub struct RunSummary {
    command: &'static str,
    started: SystemTime,
    clock: Instant,
    configs: Map<String, Value>,
    timings: Vec<(String, Duration)>,
    outputs: Vec<PathBuf>,
}

impl RunSummary {
    pub fn new(command: &'static str) -> Self {
        RunSummary {
            command,
            started: SystemTime::now(),
            clock: Instant::now(),
            configs: Map::new(),
            timings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.configs.insert(key.to_string(), v);
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push((stage.to_string(), t.elapsed()));
        crate::progress(format_args!("{stage}: {:.2?}", t.elapsed()));
        out
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn write(self, path: &Path) -> CliResult<()> {
        let unix = self.started.duration_since(UNIX_EPOCH).unwrap_or_default();
        let timings: Map<String, Value> = self
            .timings
            .iter()
            .map(|(k, d)| (k.clone(), json!(d.as_secs_f64())))
            .collect();
        let summary = json!({
            "tool": "organpp",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "args": std::env::args().collect::<Vec<_>>(),
            "jobs": rayon::current_num_threads(),
            "started_unix_s": unix.as_secs_f64(),
            "elapsed_s": self.clock.elapsed().as_secs_f64(),
            "timings_s": timings,
            "configs": self.configs,
            "outputs": self.outputs,
        });
        write_json(path, &summary)
    }
}
