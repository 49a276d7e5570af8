use super::{CueEmbedding, CueKind};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters, CUE_CONTEXT, CUE_SPEAKER};

/// `e · W` with the kind's `[E, D]` projection; an absent cue gives zeros.
pub fn project_cue(e: &CueEmbedding, params: &Parameters, cfg: &ModelConfig) -> Result<Vec<f32>> {
    let (name, dim) = match e.kind() {
        CueKind::Context => (CUE_CONTEXT, cfg.context_dim),
        CueKind::Speaker => (CUE_SPEAKER, cfg.speaker_dim),
    };
    let w = params
        .get(name)
        .ok_or_else(|| Error::invalid(format!("{} variant has no {} projection", cfg.variant, e.kind())))?;
    if e.dim() != dim || w.shape() != [dim, cfg.embed_dim] {
        return Err(Error::invalid(format!(
            "{} cue of dimension {} does not match projection {:?}",
            e.kind(),
            e.dim(),
            w.shape()
        )));
    }
    let d = cfg.embed_dim;
    let mut out = vec![0.0f32; d];
    if e.is_present() {
        for (i, &x) in e.vector().iter().enumerate() {
            for (o, &wv) in out.iter_mut().zip(&w.data()[i * d..(i + 1) * d]) {
                *o += x * wv;
            }
        }
    }
    Ok(out)
}
