//! Run directories: config echo, append-only log, JSON reports, checkpoints.
//!
//! ```text
//! <run>/config.toml        resolved configuration of the latest invocation
//! <run>/log.txt            timestamped progress lines
//! <run>/reports/*.json     machine-readable results
//! <run>/reports/*.txt      human-readable tables
//! <run>/checkpoints/*.ckpt model checkpoints
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use chunkdiff_core::config::RunConfig;
use serde::Serialize;

use crate::error::{io_err, Error, Result};
use crate::runfile::save_config;

/// Progress sink shared by the training and evaluation loops.
pub struct Logger {
    file: Option<Mutex<File>>,
    echo: bool,
    start: Instant,
}

impl Logger {
    pub fn silent() -> Self {
        Self { file: None, echo: false, start: Instant::now() }
    }

    pub fn stderr() -> Self {
        Self { file: None, echo: true, start: Instant::now() }
    }

    pub fn to_file(path: &Path, echo: bool) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self { file: Some(Mutex::new(f)), echo, start: Instant::now() })
    }

    pub fn log(&self, msg: &str) {
        let line = format!("[{:8.1}s] {msg}", self.start.elapsed().as_secs_f64());
        if self.echo {
            eprintln!("{line}");
        }
        if let Some(f) = &self.file {
            let _ = writeln!(f.lock().unwrap(), "{line}");
        }
    }
}

pub struct RunDir {
    pub root: PathBuf,
    pub logger: Logger,
}

impl RunDir {
    /// Creates the directory tree and echoes `cfg` to `config.toml`.
    pub fn create(root: &Path, cfg: &RunConfig, echo: bool) -> Result<Self> {
        for sub in ["reports", "checkpoints"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        save_config(cfg, &root.join("config.toml"))?;
        let logger = Logger::to_file(&root.join("log.txt"), echo)?;
        Ok(Self { root: root.to_path_buf(), logger })
    }

    pub fn log(&self, msg: &str) {
        self.logger.log(msg);
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let p = self.report(&format!("{name}.json"));
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.report(name);
        fs::write(&p, text).map_err(io_err(&p))?;
        Ok(p)
    }
}
