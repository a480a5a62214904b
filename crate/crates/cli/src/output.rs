//! Output directory handling. Every file is written to `<name>.partial` and
//! renamed into place once complete, so a reader never sees a torn file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through `fill`, via a `.partial` sibling.
    pub fn write<F>(&self, name: &str, fill: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let target = self.path(name);
        let partial = self.path(&format!("{name}.partial"));
        let file = File::create(&partial).with_context(|| format!("creating {}", partial.display()))?;
        let mut w = BufWriter::new(file);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        fs::rename(&partial, &target).with_context(|| format!("renaming {}", partial.display()))?;
        Ok(target)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config_path: Option<String>,
    pub seed: u64,
    pub out_dir: String,
    pub version: &'static str,
    pub threads: Option<usize>,
    /// Seconds since the Unix epoch when the run started.
    pub started_at: f64,
    /// The fully resolved configuration after flag overrides.
    pub config: &'a crate::config::RunConfig,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_fill_leaves_only_partial() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutDir::create(dir.path()).unwrap();
        let r = out.write("x.csv", |w| {
            writeln!(w, "a")?;
            anyhow::bail!("boom")
        });
        assert!(r.is_err());
        assert!(!out.path("x.csv").exists());
        assert!(out.path("x.csv.partial").exists());
        out.write("y.csv", |w| Ok(writeln!(w, "b")?)).unwrap();
        assert_eq!(fs::read_to_string(out.path("y.csv")).unwrap(), "b\n");
        assert!(!out.path("y.csv.partial").exists());
    }
}
