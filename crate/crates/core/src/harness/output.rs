use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset;
use crate::error::{Error, Result};
use crate::gridcore::Tensor;

pub const CSV_HEADER: [&str; 7] = ["protocol", "model", "seed", "condition", "target", "metric", "value"];

/// One measurement. `condition` is a `key=value` list joined with `;`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub protocol: String,
    pub model: String,
    pub seed: u64,
    pub condition: String,
    pub target: String,
    pub metric: String,
    pub value: f64,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn records_to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.to_string()))
}

/// CSV with the fixed header; identical records give identical bytes.
pub fn export_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_atomic(path, &records_to_csv(records)?)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// 8-bit RGBA of the clamped visible channels; byte-stable.
pub fn export_png(grid: &Tensor, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    dataset::write_png(grid, path)
}

/// `step,loss` rows.
pub fn export_loss_curve(losses: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in losses.iter().enumerate() {
        w.serialize((i, l)).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Csv(e.to_string()))?)
}

/// JSON-lines event log, to stderr and optionally a file.
pub struct Logger {
    file: Option<Mutex<fs::File>>,
    echo: bool,
}

impl Logger {
    pub fn stderr() -> Self {
        Logger { file: None, echo: true }
    }

    pub fn silent() -> Self {
        Logger { file: None, echo: false }
    }

    /// Appends to `path` and echoes to stderr when `echo` is set.
    pub fn to_file(path: &Path, echo: bool) -> Result<Self> {
        ensure_parent(path)?;
        let f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Logger {
            file: Some(Mutex::new(f)),
            echo,
        })
    }

    pub fn event(&self, level: &str, event: &str, fields: serde_json::Value) {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let mut line = serde_json::json!({ "ts": ts, "level": level, "event": event });
        if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let text = line.to_string();
        if self.echo {
            eprintln!("{text}");
        }
        if let Some(f) = &self.file {
            if let Ok(mut f) = f.lock() {
                let _ = writeln!(f, "{text}");
            }
        }
    }

    pub fn info(&self, event: &str, fields: serde_json::Value) {
        self.event("info", event, fields);
    }

    pub fn warn(&self, event: &str, fields: serde_json::Value) {
        self.event("warn", event, fields);
    }
}
