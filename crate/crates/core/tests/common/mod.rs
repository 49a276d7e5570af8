#![allow(dead_code)]

use std::rc::Rc;

use cse_core::cues::{CueEmbedding, CueKind};
use cse_core::model::{Cues, ForwardGraph, ModelConfig, Parameters, Variant};
use cse_core::signal::{make_mixture_sample, synth_toy_source, AugmentConfig, MixtureSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// D=8, C=4, one Intra and one Inter layer.
pub fn grad_config(variant: Variant, n: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(variant, n);
    cfg.embed_dim = 8;
    cfg.chunk_size = 4;
    cfg.num_heads = 2;
    cfg.context_dim = 6;
    cfg.speaker_dim = 5;
    cfg
}

pub fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-0.8f32..0.8)).collect()
}

pub fn random_cue(rng: &mut ChaCha8Rng, kind: CueKind, dim: usize) -> CueEmbedding {
    CueEmbedding::new(kind, (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

pub struct GradCase {
    pub cfg: ModelConfig,
    pub mixture: Vec<f64>,
    pub references: Vec<Vec<f64>>,
    pub context: Option<CueEmbedding>,
    pub speaker: Option<CueEmbedding>,
    pub target: usize,
}

impl GradCase {
    pub fn new(variant: Variant, seed: u64) -> Self {
        let cfg = grad_config(variant, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let references: Vec<Vec<f64>> = (0..2)
            .map(|_| random_signal(&mut rng, 64).into_iter().map(f64::from).collect())
            .collect();
        let mixture = (0..64).map(|i| references[0][i] + references[1][i]).collect();
        let context = variant
            .uses_context()
            .then(|| random_cue(&mut rng, CueKind::Context, cfg.context_dim));
        let speaker = variant
            .uses_speaker()
            .then(|| random_cue(&mut rng, CueKind::Speaker, cfg.speaker_dim));
        GradCase {
            cfg,
            mixture,
            references,
            context,
            speaker,
            target: 1,
        }
    }

    /// Sum of per-stream negative SI-SNR against fixed references, plus
    /// cross-entropy on the target logits when present.
    pub fn gradients(&self, params: &Parameters<f64>) -> (f64, Vec<(String, Vec<f64>)>) {
        let mut fg = ForwardGraph::new(&self.cfg, params).unwrap();
        let vars = fg
            .run(&self.mixture, Cues::both(self.context.as_ref(), self.speaker.as_ref()))
            .unwrap();
        let mut terms = Vec::new();
        for (i, &s) in vars.streams.iter().enumerate() {
            let r: Rc<[f64]> = self.references[(i + self.target) % 2].clone().into();
            terms.push(fg.graph.si_snr_loss(s, r, 1e-8));
        }
        if let Some(z) = vars.target_logits {
            terms.push(fg.graph.cross_entropy(z, self.target));
        }
        let all: Vec<_> = terms.iter().map(|&t| fg.graph.reshape(t, &[1])).collect();
        let cat = fg.graph.concat(&all);
        let total = fg.graph.sum(cat);
        let grads = fg.graph.backward(total);
        let named = fg
            .param_vars()
            .iter()
            .map(|(name, &v)| (name.clone(), grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()))
            .collect();
        (fg.graph.value(total).item(), named)
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter element. Elements far below the tensor's gradient
/// scale are compared relative to `1e-3` of that scale.
pub fn max_grad_error(case: &GradCase, params: &Parameters<f64>, step: f64) -> (f64, String) {
    let (_, named) = case.gradients(params);
    let mut worst = (0.0, String::new());
    for (name, analytic) in named {
        let n = params.get(&name).unwrap().len();
        assert_eq!(analytic.len(), n, "{name} has no gradient");
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..n {
            let mut p = params.clone();
            p.get_mut(&name).unwrap().data_mut()[i] += step;
            let up = case.loss_value(&p);
            p.get_mut(&name).unwrap().data_mut()[i] -= 2.0 * step;
            let down = case.loss_value(&p);
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale).max(1e-12);
            let err = (a - numeric).abs() / denom;
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

impl GradCase {
    pub fn loss_value(&self, params: &Parameters<f64>) -> f64 {
        let mut fg = ForwardGraph::new(&self.cfg, params).unwrap();
        let vars = fg
            .run(&self.mixture, Cues::both(self.context.as_ref(), self.speaker.as_ref()))
            .unwrap();
        let mut total = 0.0;
        for (i, &s) in vars.streams.iter().enumerate() {
            let r = &self.references[(i + self.target) % 2];
            total += cse_core::autograd::si_snr_loss_value(fg.graph.value(s).data(), r, 1e-8);
        }
        if let Some(z) = vars.target_logits {
            let z = fg.graph.value(z).data();
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - z[self.target];
        }
        total
    }
}

/// `count` fixed mixtures of distinct toy speakers, targets cycling over
/// stream indices, each with its own context line.
pub fn toy_mixtures(n_streams: usize, count: usize, duration_s: f64, seed: u64) -> Vec<MixtureSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let sources: Vec<_> = (0..n_streams)
                .map(|k| synth_toy_source((n_streams * i + k) as u32, duration_s, 8000, &mut rng).unwrap())
                .collect();
            make_mixture_sample(
                &sources,
                i % n_streams,
                &format!("Speaker 1: line {i}"),
                &AugmentConfig::mixing_only(),
                &mut rng,
            )
            .unwrap()
        })
        .collect()
}
