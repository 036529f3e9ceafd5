//! Re-validation of artifacts written by the pipeline.

use std::io::Read;
use std::path::Path;

use serde::Serialize;
use sonotext::audio::{FrameFeatureSequence, FEATURE_MAGIC};
use sonotext::mixture::{load_manifest, MixtureSpec};
use sonotext::model::{Checkpoint, CHECKPOINT_MAGIC};
use sonotext::quantizer::{read_token_file, Codebook, CODEBOOK_MAGIC};
use sonotext::vocab::JointVocabulary;

use crate::sidecar::Sidecar;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Verified {
    pub path: String,
    pub kind: &'static str,
    pub summary: String,
    /// Config hash recorded next to the artifact, when present.
    pub recorded_config_hash: Option<String>,
}

pub fn verify(path: &Path) -> Result<Verified, CliError> {
    let mut head = [0u8; 4];
    let n = std::fs::File::open(path)?.read(&mut head)?;
    let (kind, summary) = if n == 4 && &head == FEATURE_MAGIC {
        let f = FrameFeatureSequence::load(path)?;
        (
            "features",
            format!("{} frames x {} dims at {} Hz", f.num_frames, f.dim, f.frame_rate),
        )
    } else if n == 4 && &head == CODEBOOK_MAGIC {
        let c = Codebook::load(path)?;
        ("codebook", format!("K={} D={} id={}", c.k(), c.dim(), c.id()))
    } else if n == 4 && &head == CHECKPOINT_MAGIC {
        let c = Checkpoint::load(path)?;
        (
            "checkpoint",
            format!(
                "t={} a={} m={} layers={} step={}",
                c.config.text_vocab, c.config.audio_vocab, c.config.dim, c.config.layers, c.step
            ),
        )
    } else {
        let text = std::fs::read_to_string(path)
            .map_err(|_| CliError::Data(format!("{}: unrecognized binary artifact", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "toml" => {
                let m = MixtureSpec::from_toml(&text)?;
                (
                    "mixture",
                    format!("{} components, alpha {}", m.components.len(), m.alpha),
                )
            }
            "txt" | "vocab" => {
                let v = JointVocabulary::from_manifest(&text)?;
                ("vocabulary", format!("t={} a={}", v.text_size(), v.audio_size()))
            }
            "jsonl" if text.contains("\"tokens\"") => {
                let seqs = read_token_file(path)?;
                ("tokens", format!("{} sequences", seqs.len()))
            }
            "jsonl" => {
                let recs = load_manifest(path)?;
                ("manifest", format!("{} records", recs.len()))
            }
            _ => return Err(CliError::Data(format!("{}: unknown artifact type", path.display()))),
        }
    };
    Ok(Verified {
        path: path.display().to_string(),
        kind,
        summary,
        recorded_config_hash: Sidecar::read(path).map(|s| s.config_hash),
    })
}
