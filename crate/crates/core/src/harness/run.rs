//! Run directories: `config.snapshot`, `network.cfg`, `checkpoints/`,
//! `metrics/`, `spectrograms/`, `estimates/`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dasep_autodiff::{read_checkpoint, write_checkpoint, Checkpoint};

use super::config::RunConfig;
use crate::embednet::NetworkConfig;
use crate::error::{Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const NETWORK_FILE: &str = "network.cfg";

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory; an existing one is an error.
    pub fn create(root: impl AsRef<Path>, cfg: &RunConfig) -> Result<RunDir> {
        let root = root.as_ref().to_path_buf();
        if root.exists() {
            return Err(Error::Config(format!(
                "run directory {} already exists",
                root.display()
            )));
        }
        std::fs::create_dir_all(&root)?;
        for sub in ["checkpoints", "metrics", "spectrograms", "estimates"] {
            std::fs::create_dir(root.join(sub))?;
        }
        let dir = RunDir { root };
        dir.write_new(CONFIG_SNAPSHOT, cfg.to_kv_string().as_bytes())?;
        dir.write_new(NETWORK_FILE, cfg.network().to_kv_string().as_bytes())?;
        Ok(dir)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<RunDir> {
        let root = root.as_ref().to_path_buf();
        if !root.join(CONFIG_SNAPSHOT).is_file() {
            return Err(Error::Config(format!("{} is not a run directory", root.display())));
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.path(CONFIG_SNAPSHOT))
    }

    fn write_new(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let mut f = OpenOptions::new().write(true).create_new(true).open(self.path(rel))?;
        f.write_all(bytes)?;
        Ok(())
    }

    /// Opens `metrics/<name>` for appending, writing `header` if the file is new.
    pub fn metrics(&self, name: &str, header: &str) -> Result<BufWriter<File>> {
        let path = self.path("metrics").join(name);
        let fresh = !path.exists();
        let f = OpenOptions::new().create(true).append(true).open(&path)?;
        let mut w = BufWriter::new(f);
        if fresh {
            writeln!(w, "{header}")?;
        }
        Ok(w)
    }

    /// Creates `metrics/<name>`; fails if it already exists.
    pub fn new_metrics(&self, name: &str, header: &str) -> Result<BufWriter<File>> {
        let f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(self.path("metrics").join(name))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{header}")?;
        Ok(w)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path("checkpoints").join(format!("step_{step:08}.ckpt"))
    }

    pub fn save_checkpoint(&self, ckpt: &Checkpoint) -> Result<PathBuf> {
        let path = self.checkpoint_path(ckpt.step);
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            write_checkpoint(&mut w, ckpt)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }

    /// The checkpoint with the highest step, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let mut best: Option<PathBuf> = None;
        for e in std::fs::read_dir(self.path("checkpoints"))? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "ckpt") && best.as_ref().is_none_or(|b| p > *b) {
                best = Some(p);
            }
        }
        Ok(best)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(read_checkpoint(std::io::BufReader::new(f))?)
}

/// The architecture stored beside a checkpoint (`<run>/network.cfg` for
/// `<run>/checkpoints/*.ckpt`, or `network.cfg` in the same directory).
pub fn network_config_for(checkpoint: &Path) -> Result<NetworkConfig> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    for cand in [dir.join(NETWORK_FILE), dir.join("..").join(NETWORK_FILE)] {
        if cand.is_file() {
            return NetworkConfig::from_kv_str(&std::fs::read_to_string(cand)?);
        }
    }
    Err(Error::Data(format!(
        "no {NETWORK_FILE} found next to {}",
        checkpoint.display()
    )))
}
