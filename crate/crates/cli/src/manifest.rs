use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use afs_core::pipeline::Fingerprint;

use crate::commands::CliError;

/// Git-style content hash: SHA-256 over `blob <len>\0` followed by the bytes.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut blob = format!("blob {}\0", bytes.len()).into_bytes();
    blob.extend_from_slice(&bytes);
    Ok(Fingerprint::of_bytes(&blob).hex())
}

/// `out.ckpt` -> `out.ckpt.run-manifest`.
pub fn default_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".run-manifest");
    PathBuf::from(s)
}

/// What one invocation read, wrote and ran with.
#[derive(Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// `key = value` lines.
    pub config: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            seed,
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// One tab-separated record per line: command, seed, inputs and outputs
    /// with their content hashes, then the config.
    pub fn to_text(&self) -> Result<String, CliError> {
        let mut s = format!("command\t{}\n", self.command);
        let seed = self.seed.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(s, "seed\t{seed}");
        for p in &self.inputs {
            let _ = writeln!(s, "input\t{}\t{}", p.display(), content_hash(p)?);
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output\t{}\t{}", p.display(), content_hash(p)?);
        }
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            let _ = writeln!(s, "config\t{line}");
        }
        Ok(s)
    }

    /// Writes to `target`, else next to the first output, else to stderr.
    pub fn write(&self, target: Option<&Path>) -> Result<(), CliError> {
        let text = self.to_text()?;
        match target
            .map(Path::to_path_buf)
            .or_else(|| self.outputs.first().map(|p| default_path(p)))
        {
            Some(path) => fs::write(&path, text).map_err(|e| CliError::io(&path, e)),
            None => {
                eprint!("{text}");
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_the_blob_convention() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        fs::write(&p, b"hello\n").unwrap();
        // `git hash-object --object-format=sha256` of "hello\n".
        assert_eq!(
            content_hash(&p).unwrap(),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn sections_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in");
        fs::write(&p, b"abc").unwrap();
        let mut m = RunManifest::new("eval", Some(3));
        m.input(&p);
        m.config = "a = 1\n\nb = 2\n".into();
        let text = m.to_text().unwrap();
        let kinds: Vec<&str> = text.lines().map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(kinds, ["command", "seed", "input", "config", "config"]);
        assert!(text.contains("seed\t3\n"));
    }
}
