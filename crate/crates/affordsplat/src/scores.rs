//! Score arrays: raw little-endian `f32`, one value per splat in file order,
//! with a JSON sidecar at `<path>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub count: usize,
    pub dtype: String,
    pub byte_order: String,
    /// Object id, or the input file the scores belong to.
    pub source: String,
    pub question: String,
    pub answer: Option<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_scores(path: &Path, scores: &[f32], source: &str, question: &str, answer: Option<&str>) -> Result<()> {
    let mut bytes = Vec::with_capacity(scores.len() * 4);
    for s in scores {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = ScoreSidecar {
        count: scores.len(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        source: source.into(),
        question: question.into(),
        answer: answer.map(String::from),
    };
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::format(e.to_string()))?;
    let sp = sidecar_path(path);
    std::fs::write(&sp, json).map_err(|e| Error::io(sp, e))
}

pub fn read_scores(path: &Path) -> Result<(Vec<f32>, ScoreSidecar)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let side: ScoreSidecar = serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", sp.display())))?;
    if bytes.len() != side.count * 4 {
        return Err(Error::format(format!("{} holds {} bytes for {} scores", path.display(), bytes.len(), side.count)));
    }
    let scores = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((scores, side))
}
