use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CueEmbedding;
use crate::error::{Error, Result};

/// Training-time cue masking for the hybrid variant: drop the context cue
/// with `p_context`, else the speaker cue with `p_speaker`, else keep both.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CueDropout {
    pub p_context: f64,
    pub p_speaker: f64,
}

impl Default for CueDropout {
    fn default() -> Self {
        CueDropout {
            p_context: 1.0 / 3.0,
            p_speaker: 1.0 / 3.0,
        }
    }
}

impl CueDropout {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.p_context) || !ok(self.p_speaker) || self.p_context + self.p_speaker > 1.0 {
            return Err(Error::Validation(format!(
                "cue dropout probabilities {} and {} must be in [0, 1] and sum to at most 1",
                self.p_context, self.p_speaker
            )));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        context: &CueEmbedding,
        speaker: &CueEmbedding,
        rng: &mut R,
    ) -> (CueEmbedding, CueEmbedding) {
        let u: f64 = rng.gen();
        if u < self.p_context {
            (context.masked(), speaker.clone())
        } else if u < self.p_context + self.p_speaker {
            (context.clone(), speaker.masked())
        } else {
            (context.clone(), speaker.clone())
        }
    }
}

/// [`CueDropout::apply`] with the default probabilities.
pub fn dropout_cues<R: Rng + ?Sized>(
    context: &CueEmbedding,
    speaker: &CueEmbedding,
    rng: &mut R,
) -> (CueEmbedding, CueEmbedding) {
    CueDropout::default().apply(context, speaker, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cues::CueKind;
    use rand::rngs::mock::StepRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cues() -> (CueEmbedding, CueEmbedding) {
        (
            CueEmbedding::new(CueKind::Context, vec![1.0, 2.0]).unwrap(),
            CueEmbedding::new(CueKind::Speaker, vec![3.0]).unwrap(),
        )
    }

    #[test]
    fn forced_branches() {
        let (c, s) = cues();
        // StepRng yields its state as raw bits; 0 maps to u = 0.0.
        let (a, b) = dropout_cues(&c, &s, &mut StepRng::new(0, 0));
        assert!(!a.is_present() && b.is_present());
        let (a, b) = dropout_cues(&c, &s, &mut StepRng::new(u64::MAX, 0));
        assert!(a.is_present() && b.is_present());
    }

    #[test]
    fn branch_frequencies() {
        let (c, s) = cues();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (a, b) = dropout_cues(&c, &s, &mut rng);
            assert!(a.is_present() || b.is_present());
            counts[match (a.is_present(), b.is_present()) {
                (false, true) => 0,
                (true, false) => 1,
                _ => 2,
            }] += 1;
        }
        for k in counts {
            assert!((k as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn validation() {
        assert!(CueDropout { p_context: 0.7, p_speaker: 0.5 }.validate().is_err());
        CueDropout::default().validate().unwrap();
    }
}
