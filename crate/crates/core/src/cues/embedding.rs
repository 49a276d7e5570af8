use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueKind {
    Context,
    Speaker,
}

impl CueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CueKind::Context => "context",
            CueKind::Speaker => "speaker",
        }
    }
}

impl std::fmt::Display for CueKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single conditioning vector. An absent cue keeps its dimension but is
/// all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CueEmbedding {
    vector: Vec<f32>,
    kind: CueKind,
    present: bool,
}

impl CueEmbedding {
    pub fn new(kind: CueKind, vector: Vec<f32>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::invalid(format!("empty {kind} embedding")));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite {kind} embedding")));
        }
        Ok(CueEmbedding {
            vector,
            kind,
            present: true,
        })
    }

    pub fn absent(kind: CueKind, dim: usize) -> Self {
        CueEmbedding {
            vector: vec![0.0; dim],
            kind,
            present: false,
        }
    }

    /// The same cue marked absent.
    pub fn masked(&self) -> Self {
        Self::absent(self.kind, self.dim())
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn kind(&self) -> CueKind {
        self.kind
    }

    pub fn is_present(&self) -> bool {
        self.present
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_is_zero() {
        let c = CueEmbedding::new(CueKind::Speaker, vec![0.5, -1.0]).unwrap();
        let m = c.masked();
        assert!(!m.is_present());
        assert_eq!(m.vector(), &[0.0, 0.0]);
        assert_eq!(m.kind(), CueKind::Speaker);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(CueEmbedding::new(CueKind::Context, vec![f32::NAN]).is_err());
    }
}
