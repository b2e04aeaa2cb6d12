//! Run manifests: what a command read and wrote, with SHA-256 digests, so a
//! rerun can be checked byte for byte.

use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::commands::Outcome;
use crate::config::RunConfig;

/// Version string: package version plus `git describe` output when the build
/// ran inside a repository.
pub const VERSION: &str = env!("ICEMAMBA_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digests(paths: &[std::path::PathBuf]) -> std::io::Result<Map<String, Value>> {
    let mut map = Map::new();
    for p in paths {
        map.insert(p.display().to_string(), Value::String(sha256_hex(&std::fs::read(p)?)));
    }
    Ok(map)
}

/// Writes `<out>/<command>_manifest.json` and returns its path.
pub fn write(command: &str, cfg: &RunConfig, config_file: Option<&Path>, outcome: &Outcome) -> std::io::Result<std::path::PathBuf> {
    let mut inputs = outcome.inputs.clone();
    inputs.extend(config_file.map(Path::to_path_buf));
    let doc = json!({
        "command": command,
        "version": VERSION,
        "config_sha256": sha256_hex(cfg.canonical().as_bytes()),
        "config": cfg.canonical(),
        "seeds": outcome.seeds,
        "inputs": digests(&inputs)?,
        "outputs": digests(&outcome.outputs)?,
    });
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(format!("{command}_manifest.json"));
    let text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}
