//! Run manifests: one `manifest.json` per output directory, written before
//! any other output and finalised when the command ends.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::Result;
use crate::nn::fnv1a;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// Content hash (fnv1a-64, hex) of the checkpoint this run read or wrote.
    pub checkpoint_hash: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn now_unix() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", fnv1a(bytes)))
}

impl RunManifest {
    pub fn begin(
        command: &str,
        config: serde_json::Value,
        seed: u64,
        inputs: Vec<String>,
        out_dir: &Path,
    ) -> Result<RunManifest> {
        std::fs::create_dir_all(out_dir)?;
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs,
            output_dir: out_dir.display().to_string(),
            started_unix: now_unix(),
            finished_unix: None,
            checkpoint_hash: None,
        };
        manifest.write(out_dir)?;
        Ok(manifest)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_FILE);
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<()> {
        self.finished_unix = Some(now_unix());
        self.write(out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lifecycle() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::begin(
            "sample",
            serde_json::json!({"n": 4}),
            9,
            vec!["ckpt.bin".into()],
            dir.path(),
        )
        .unwrap();
        let on_disk: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert_eq!(on_disk.command, "sample");
        assert!(on_disk.finished_unix.is_none());

        m.checkpoint_hash = Some("abc".into());
        m.finish(dir.path()).unwrap();
        let done: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        assert!(done.finished_unix.is_some());
        assert_eq!(done.checkpoint_hash.as_deref(), Some("abc"));
    }

    #[test]
    fn content_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        std::fs::write(&p, b"hello").unwrap();
        let a = content_hash(&p).unwrap();
        let b = content_hash(&p).unwrap();
        assert_eq!(a, b);
        std::fs::write(&p, b"hellp").unwrap();
        assert_ne!(a, content_hash(&p).unwrap());
    }
}
