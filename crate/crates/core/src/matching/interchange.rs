use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Correspondence, MatchSet};
use crate::error::{Error, Result};

fn default_frame() -> [usize; 2] {
    [300, 300]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileMatch {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub similarity: f64,
}

/// Correspondences exchanged with other tools (one model, one image pair).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceFile {
    pub image_a: String,
    pub image_b: String,
    pub model: String,
    /// `[width, height]` of the frame the coordinates live in.
    #[serde(default = "default_frame")]
    pub frame: [usize; 2],
    pub matches: Vec<FileMatch>,
    /// Present after geometric verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inliers: Option<Vec<bool>>,
}

impl CorrespondenceFile {
    pub fn from_match_set(
        set: &MatchSet,
        image_a: &str,
        image_b: &str,
        model: &str,
        frame: [usize; 2],
    ) -> Self {
        Self {
            image_a: image_a.into(),
            image_b: image_b.into(),
            model: model.into(),
            frame,
            matches: set
                .matches
                .iter()
                .map(|c| FileMatch {
                    xa: c.xa,
                    ya: c.ya,
                    xb: c.xb,
                    yb: c.yb,
                    similarity: c.similarity,
                })
                .collect(),
            inliers: set.inliers.clone(),
        }
    }

    /// Entries become correspondences tagged with the model name; indices are
    /// file positions.
    pub fn to_match_set(&self) -> MatchSet {
        MatchSet {
            matches: self
                .matches
                .iter()
                .enumerate()
                .map(|(i, m)| Correspondence {
                    index_a: i,
                    index_b: i,
                    xa: m.xa,
                    ya: m.ya,
                    xb: m.xb,
                    yb: m.yb,
                    similarity: m.similarity,
                    source: self.model.clone(),
                })
                .collect(),
            inliers: self.inliers.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(m) = &self.inliers {
            if m.len() != self.matches.len() {
                return Err(Error::invalid(format!(
                    "{} inlier flags for {} matches",
                    m.len(),
                    self.matches.len()
                )));
            }
        }
        if self.matches.iter().any(|m| {
            ![m.xa, m.ya, m.xb, m.yb, m.similarity]
                .iter()
                .all(|v| v.is_finite())
        }) {
            return Err(Error::invalid("non-finite coordinate or similarity"));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        file.validate().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
