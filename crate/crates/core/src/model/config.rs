use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which conditioning and output layout the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain separator, no cue, `n` streams.
    Separator,
    /// Context cue, `n` streams plus target logits.
    ContSep,
    /// Context cue, target stream only.
    Context,
    /// Context and speaker cues (either may be absent), target stream only.
    Hybrid,
}

impl Variant {
    /// Number of cue positions prepended in every Intra/Inter layer.
    pub fn cue_arity(self) -> usize {
        match self {
            Variant::Separator => 0,
            Variant::ContSep | Variant::Context => 1,
            Variant::Hybrid => 2,
        }
    }

    pub fn uses_context(self) -> bool {
        self != Variant::Separator
    }

    pub fn uses_speaker(self) -> bool {
        self == Variant::Hybrid
    }

    pub fn is_extractor(self) -> bool {
        matches!(self, Variant::Context | Variant::Hybrid)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "separator" | "sepformer" => Ok(Variant::Separator),
            "contsep" => Ok(Variant::ContSep),
            "context" | "extractor" => Ok(Variant::Context),
            "hybrid" | "h-context" => Ok(Variant::Hybrid),
            other => Err(Error::Validation(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Separator => "separator",
            Variant::ContSep => "contsep",
            Variant::Context => "context",
            Variant::Hybrid => "hybrid",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layers_per_pass: usize,
    pub num_blocks: usize,
    pub chunk_size: usize,
    pub chunk_overlap: f64,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    pub num_heads: usize,
    pub num_streams: usize,
    pub variant: Variant,
    pub context_dim: usize,
    pub speaker_dim: usize,
    /// Exclude cue positions from attention keys: features never attend to
    /// the cues, while the cue positions still attend to the features.
    pub mask_cue_keys: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny(Variant::Context, 2)
    }
}

impl ModelConfig {
    /// Desk-scale configuration.
    pub fn tiny(variant: Variant, num_streams: usize) -> Self {
        ModelConfig {
            embed_dim: 16,
            layers_per_pass: 1,
            num_blocks: 1,
            chunk_size: 8,
            chunk_overlap: 0.5,
            encoder_kernel: 16,
            encoder_stride: 8,
            num_heads: 2,
            num_streams,
            variant,
            context_dim: 64,
            speaker_dim: 64,
            mask_cue_keys: false,
        }
    }

    /// Full-size dual-path configuration (D=256, 8 layers per pass, 2 blocks,
    /// chunk 250, 8 heads), with 4096-dim context and 192-dim speaker cues.
    pub fn paper(variant: Variant, num_streams: usize) -> Self {
        ModelConfig {
            embed_dim: 256,
            layers_per_pass: 8,
            num_blocks: 2,
            chunk_size: 250,
            chunk_overlap: 0.5,
            encoder_kernel: 16,
            encoder_stride: 8,
            num_heads: 8,
            num_streams,
            variant,
            context_dim: 4096,
            speaker_dim: 192,
            mask_cue_keys: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(self.chunk_overlap > 0.0 && self.chunk_overlap < 1.0) {
            return bad(format!("chunk_overlap {} must lie in (0, 1)", self.chunk_overlap));
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive".into());
        }
        hop_size(self.chunk_size, self.chunk_overlap)?;
        if self.encoder_kernel == 0 || self.encoder_stride == 0 {
            return bad("encoder kernel and stride must be positive".into());
        }
        if !(2..=4).contains(&self.num_streams) {
            return bad(format!("num_streams {} must be in 2..=4", self.num_streams));
        }
        if self.layers_per_pass == 0 || self.num_blocks == 0 {
            return bad("layers_per_pass and num_blocks must be positive".into());
        }
        if self.variant.uses_context() && self.context_dim == 0 {
            return bad("context_dim must be positive".into());
        }
        if self.variant.uses_speaker() && self.speaker_dim == 0 {
            return bad("speaker_dim must be positive".into());
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        hop_size(self.chunk_size, self.chunk_overlap).expect("validated config")
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Streams produced by the decoder.
    pub fn output_streams(&self) -> usize {
        if self.variant.is_extractor() {
            1
        } else {
            self.num_streams
        }
    }

    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        (samples >= self.encoder_kernel).then(|| (samples - self.encoder_kernel) / self.encoder_stride + 1)
    }
}

/// Chunk hop `C·(1 − overlap)`; must be a positive integer.
pub fn hop_size(chunk: usize, overlap: f64) -> Result<usize> {
    let hop = chunk as f64 * (1.0 - overlap);
    let r = hop.round();
    if (hop - r).abs() > 1e-9 || r < 1.0 {
        return Err(Error::invalid(format!(
            "chunk {chunk} with overlap {overlap} gives non-integral hop {hop}"
        )));
    }
    Ok(r as usize)
}
