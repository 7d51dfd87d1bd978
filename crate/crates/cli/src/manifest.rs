use anyhow::Context;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Record of one invocation, stored as `key=value` lines in
/// `<output>.manifest`.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: BTreeMap<String, String>,
    pub seed: u64,
    /// Input name, path and SHA-256.
    pub inputs: Vec<(String, PathBuf, String)>,
    pub start: u64,
    pub end: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

/// Write through a sibling temporary file and rename into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("subcommand={}\nversion={}\nseed={}\n", self.subcommand, env!("CARGO_PKG_VERSION"), self.seed);
        for (k, v) in &self.flags {
            s.push_str(&format!("flag.{k}={v}\n"));
        }
        for (name, path, hash) in &self.inputs {
            s.push_str(&format!("input.{name}.path={}\ninput.{name}.sha256={hash}\n", path.display()));
        }
        s.push_str(&format!("start_unix={}\nend_unix={}\n", self.start, self.end));
        s
    }

    pub fn write_next_to(&self, output: &Path) -> anyhow::Result<()> {
        write_atomic(&manifest_path(output), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_flags_inputs_and_times() {
        let m = RunManifest {
            subcommand: "vocab".into(),
            flags: [("size".to_string(), "100".to_string())].into(),
            seed: 3,
            inputs: vec![("corpus".into(), PathBuf::from("c.txt"), "ab".into())],
            start: 10,
            end: 12,
        };
        let text = m.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "subcommand=vocab");
        assert!(lines.contains(&"flag.size=100"));
        assert!(lines.contains(&"input.corpus.sha256=ab"));
        assert_eq!(lines.last(), Some(&"end_unix=12"));
        assert_eq!(manifest_path(Path::new("out/v.spv")), PathBuf::from("out/v.spv.manifest"));
    }
}
