//! `<artifact>.meta.json` files recording which configuration produced an artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config_hash: String,
    pub command: String,
    pub tool_version: String,
}

impl Sidecar {
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".meta.json");
        artifact.with_file_name(name)
    }

    pub fn write(artifact: &Path, config_hash: &str, command: &str) -> std::io::Result<()> {
        let s = Sidecar {
            config_hash: config_hash.to_string(),
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        std::fs::write(
            Self::path_for(artifact),
            serde_json::to_string_pretty(&s).unwrap() + "\n",
        )
    }

    pub fn read(artifact: &Path) -> Option<Sidecar> {
        let text = std::fs::read_to_string(Self::path_for(artifact)).ok()?;
        serde_json::from_str(&text).ok()
    }
}
