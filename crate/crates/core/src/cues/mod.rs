//! Conditioning cues: dialogue history, embedding providers, projection and
//! training-time cue dropout.

mod dropout;
mod embedding;
mod history;
mod project;
mod provider;

pub use dropout::{dropout_cues, CueDropout};
pub use embedding::{CueEmbedding, CueKind};
pub use history::{format_history, DialogueHistory, Turn};
pub use project::project_cue;
pub use provider::{
    context_key, embed_context, embed_speaker, estimate_f0, f0_bucket, hashed_unit_vector, speaker_key,
    CacheCueProvider, CueProvider, EmbeddingCache, ExternalCueProvider, MockCueProvider,
};
