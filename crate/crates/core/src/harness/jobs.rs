use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::output::{self, MetricsRecord};
use crate::error::{Error, Result};

/// Runs `f` over `items` on at most `workers` threads. Results keep the item
/// order; the first error (in item order) is returned.
pub fn run_pool<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|p| p.into_inner())
                .unwrap_or_else(|| Err(Error::Usage("worker exited before finishing a job".into())))
        })
        .collect()
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    fingerprint: String,
    /// Job key to its records file, relative to the output directory.
    completed: BTreeMap<String, String>,
}

/// Completed-job bookkeeping under an output directory. Every update
/// rewrites `progress.json` atomically.
pub struct Progress {
    root: PathBuf,
    manifest: Mutex<Manifest>,
}

impl Progress {
    pub const FILE: &'static str = "progress.json";

    /// Opens or creates the manifest. An existing manifest written for a
    /// different spec is an error, so results never mix.
    pub fn open(root: &Path, fingerprint: &str) -> Result<Self> {
        let path = root.join(Self::FILE);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: Manifest = serde_json::from_str(&text)?;
            if m.fingerprint != fingerprint {
                return Err(Error::Config(format!(
                    "{} holds results of a different experiment spec; choose another --out",
                    root.display()
                )));
            }
            m
        } else {
            Manifest {
                fingerprint: fingerprint.to_string(),
                completed: BTreeMap::new(),
            }
        };
        let p = Progress {
            root: root.to_path_buf(),
            manifest: Mutex::new(manifest),
        };
        p.flush(&p.manifest.lock().unwrap_or_else(|e| e.into_inner()))?;
        Ok(p)
    }

    fn flush(&self, m: &Manifest) -> Result<()> {
        output::write_atomic(&self.root.join(Self::FILE), serde_json::to_string_pretty(m)?.as_bytes())
    }

    fn records_path(&self, key: &str) -> PathBuf {
        self.root.join("records").join(format!("{key}.csv"))
    }

    /// Records of a completed job, if its file is still present.
    pub fn completed(&self, key: &str) -> Result<Option<Vec<MetricsRecord>>> {
        let m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        match m.completed.get(key) {
            Some(rel) => {
                let path = self.root.join(rel);
                if path.exists() {
                    output::read_csv(&path).map(Some)
                } else {
                    Ok(None)
                }
            }
            None => Ok(None),
        }
    }

    pub fn complete(&self, key: &str, records: &[MetricsRecord]) -> Result<()> {
        let path = self.records_path(key);
        output::export_csv(records, &path)?;
        let mut m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        m.completed.insert(key.to_string(), format!("records/{key}.csv"));
        self.flush(&m)
    }

    pub fn completed_keys(&self) -> Vec<String> {
        let m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        m.completed.keys().cloned().collect()
    }
}
