//! Output directories and their run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    /// Input path to sha256 of its content; directories list each file.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to sha256 of its content.
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
    pub exit_code: i32,
    pub wall_time_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Digests of a file, or of every regular file directly inside a directory
/// except its manifest.
pub fn input_digests(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().map_or(true, |n| n != MANIFEST_FILE))
            .collect();
        entries.sort();
        for p in entries {
            out.insert(p.display().to_string(), file_digest(&p)?);
        }
    } else {
        out.insert(path.display().to_string(), file_digest(path)?);
    }
    Ok(out)
}

/// Collects primary outputs of one command in its output directory.
pub struct OutputDir {
    dir: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> CliResult<OutputDir> {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Writes via a temporary file and rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &target)?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(crate::error::internal)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.written
    }
}

pub fn read_manifest(path: &Path) -> CliResult<RunManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("nestdrug".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), "1".to_string()),
        ("manifest_format".to_string(), "1".to_string()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn output_dir_records_digests_and_leaves_no_temp_files() {
        let d = tempfile::tempdir().unwrap();
        let mut o = OutputDir::create(&d.path().join("out")).unwrap();
        o.write("a.txt", b"abc").unwrap();
        assert_eq!(o.outputs()["a.txt"], sha256_hex(b"abc"));
        let names: Vec<_> = fs::read_dir(o.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.txt")]);
        let digests = input_digests(o.path()).unwrap();
        assert_eq!(digests.len(), 1);
    }
}
