//! Optimization loop: AdamW with warmup + cosine decay, per-variant
//! objectives, cue dropout, warm start, loss trace and checkpoints.

mod objective;
mod optim;
mod schedule;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use objective::{build_objective, Objective};
pub use optim::{clip_grad_norm, grad_norm, optimizer_step, Grads, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use schedule::{lr_at_step, TrainConfig};

use crate::cues::{context_key, embed_context, embed_speaker, speaker_key, CueEmbedding, CueKind, CueProvider};
use crate::error::{Error, Result};
use crate::model::{Cues, ForwardGraph, Model, ModelConfig, Parameters, Variant, WarmStart};
use crate::signal::MixtureSample;

/// Anything that yields training mixtures.
pub trait SampleSource {
    fn next_sample(&mut self, rng: &mut ChaCha8Rng) -> Result<MixtureSample>;
}

/// Cycles through a fixed list in order.
#[derive(Clone, Debug)]
pub struct FixedSamples {
    samples: Vec<MixtureSample>,
    next: usize,
}

impl FixedSamples {
    pub fn new(samples: Vec<MixtureSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        for s in &samples {
            s.validate()?;
        }
        Ok(FixedSamples { samples, next: 0 })
    }
}

impl SampleSource for FixedSamples {
    fn next_sample(&mut self, _rng: &mut ChaCha8Rng) -> Result<MixtureSample> {
        let s = self.samples[self.next].clone();
        self.next = (self.next + 1) % self.samples.len();
        Ok(s)
    }
}

/// Memoizes cue embeddings by provider key.
pub struct CueCache<'a> {
    provider: &'a mut dyn CueProvider,
    memo: HashMap<String, CueEmbedding>,
}

impl<'a> CueCache<'a> {
    pub fn new(provider: &'a mut dyn CueProvider) -> Self {
        CueCache {
            provider,
            memo: HashMap::new(),
        }
    }

    pub fn context(&mut self, text: &str) -> Result<CueEmbedding> {
        let key = context_key(text);
        if let Some(e) = self.memo.get(&key) {
            return Ok(e.clone());
        }
        let e = embed_context(text, self.provider)?;
        self.memo.insert(key, e.clone());
        Ok(e)
    }

    pub fn speaker(&mut self, enrollment: &crate::signal::Waveform) -> Result<CueEmbedding> {
        let key = speaker_key(enrollment);
        if let Some(e) = self.memo.get(&key) {
            return Ok(e.clone());
        }
        let e = embed_speaker(enrollment, self.provider)?;
        self.memo.insert(key, e.clone());
        Ok(e)
    }

    /// The cues a variant consumes for `sample`. A hybrid sample without an
    /// enrollment gets an absent speaker cue.
    pub fn cues_for(
        &mut self,
        variant: Variant,
        sample: &MixtureSample,
    ) -> Result<(Option<CueEmbedding>, Option<CueEmbedding>)> {
        let context = if variant.uses_context() {
            Some(self.context(&sample.context_text)?)
        } else {
            None
        };
        let speaker = if variant.uses_speaker() {
            Some(match &sample.enrollment {
                Some(w) => self.speaker(w)?,
                None => CueEmbedding::absent(CueKind::Speaker, self.provider.speaker_dim()),
            })
        } else {
            None
        };
        Ok((context, speaker))
    }
}

/// Loss values of one sample or the mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub ce_term: f64,
    pub pit_term: f64,
}

impl LossTerms {
    fn add(&mut self, o: LossTerms) {
        self.loss += o.loss;
        self.ce_term += o.ce_term;
        self.pit_term += o.pit_term;
    }

    fn scaled(self, s: f64) -> LossTerms {
        LossTerms {
            loss: self.loss * s,
            ce_term: self.ce_term * s,
            pit_term: self.pit_term * s,
        }
    }
}

fn references(sample: &MixtureSample) -> Vec<Vec<f32>> {
    sample.sources.iter().map(|s| s.samples().to_vec()).collect()
}

fn run_objective(
    cfg: &ModelConfig,
    params: &Parameters,
    sample: &MixtureSample,
    cues: Cues<'_>,
) -> Result<(ForwardGraph<f32>, Objective, LossTerms)> {
    let mut fg = ForwardGraph::new(cfg, params)?;
    let vars = fg.run(sample.mixture.samples(), cues)?;
    let obj = build_objective(&mut fg, &vars, &references(sample), sample.target_index)?;
    let v = |x| fg.graph.value(x).item() as f64;
    let terms = LossTerms {
        loss: v(obj.loss),
        ce_term: obj.ce.map_or(0.0, v),
        pit_term: v(obj.separation),
    };
    Ok((fg, obj, terms))
}

/// Objective value without gradients.
pub fn sample_loss(model: &Model, sample: &MixtureSample, cues: Cues<'_>) -> Result<LossTerms> {
    sample.validate()?;
    Ok(run_objective(&model.config, &model.params, sample, cues)?.2)
}

/// Objective value and gradients for every parameter.
pub fn sample_gradients(model: &Model, sample: &MixtureSample, cues: Cues<'_>) -> Result<(LossTerms, Grads)> {
    sample.validate()?;
    let (fg, obj, terms) = run_objective(&model.config, &model.params, sample, cues)?;
    let g = fg.graph.backward(obj.loss);
    let grads = fg
        .param_vars()
        .iter()
        .map(|(name, &var)| {
            let len = fg.graph.value(var).len();
            (name.clone(), g.get(var).map_or_else(|| vec![0.0; len], <[f32]>::to_vec))
        })
        .collect();
    Ok((terms, grads))
}

fn has_energy(sample: &MixtureSample) -> bool {
    sample.sources.iter().all(|s| s.energy() > 0.0)
}

const CROP_ATTEMPTS: usize = 16;

/// Cuts a random window of `len` samples (zero-padding shorter inputs),
/// retrying until every source has energy in the window.
pub fn crop_sample<R: Rng + ?Sized>(sample: &MixtureSample, len: usize, rng: &mut R) -> Option<MixtureSample> {
    let total = sample.mixture.len();
    if total <= len {
        let s = sample.cropped(0, len);
        return has_energy(&s).then_some(s);
    }
    (0..CROP_ATTEMPTS)
        .map(|_| sample.cropped(rng.gen_range(0..=total - len), len))
        .find(has_energy)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce_term: f64,
    pub pit_term: f64,
}

pub fn write_loss_trace(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

type EvalHook<'a> = Box<dyn FnMut(u64, &Model) -> Result<()> + 'a>;

/// Where checkpoints go and what to run every `eval_every` steps.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub out_dir: Option<PathBuf>,
    pub on_eval: Option<EvalHook<'a>>,
    /// Starting weights; when absent, the model is initialized from the seed
    /// and `init_checkpoint` (if any) is applied.
    pub initial: Option<Model>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub warm_start: Option<WarmStart>,
    pub checkpoints: Vec<PathBuf>,
}

const MAX_SAMPLE_DRAWS: usize = 64;

fn next_training_sample(
    source: &mut dyn SampleSource,
    segment_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixtureSample> {
    for _ in 0..MAX_SAMPLE_DRAWS {
        let s = source.next_sample(rng)?;
        s.validate()?;
        let len = (segment_s * s.mixture.sample_rate() as f64).round() as usize;
        if let Some(c) = crop_sample(&s, len, rng) {
            return Ok(c);
        }
    }
    Err(Error::DegenerateSignal(format!(
        "no sample with all sources active in {MAX_SAMPLE_DRAWS} draws"
    )))
}

/// Trains `model_cfg` on mixtures from `source`. Every step averages
/// per-sample gradients over the batch, clips them to the global norm and
/// applies one AdamW update. Deterministic for a fixed seed.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    source: &mut dyn SampleSource,
    provider: &mut dyn CueProvider,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let mut warm_start = None;
    let mut model = match opts.initial.take() {
        Some(m) => {
            if &m.config != model_cfg {
                return Err(Error::Validation("initial model config differs from model_cfg".into()));
            }
            m
        }
        None => {
            let mut m = Model::init(model_cfg.clone(), cfg.seed)?;
            if let Some(p) = &cfg.init_checkpoint {
                warm_start = Some(m.warm_start(&Model::load(p)?)?);
            }
            m
        }
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a1e_5eed);
    let mut cues = CueCache::new(provider);
    let mut state = OptimizerState::default();
    let mut trace = Vec::with_capacity(cfg.total_steps as usize);
    let mut checkpoints = Vec::new();

    for step in 1..=cfg.total_steps {
        let lr = lr_at_step(step, cfg)?;
        let mut total = LossTerms::default();
        let mut acc: Option<Grads> = None;
        for _ in 0..cfg.batch_size {
            let sample = next_training_sample(source, cfg.segment_s, &mut rng)?;
            let (c, s) = cues.cues_for(model.config.variant, &sample)?;
            let (c, s) = match (model.config.variant, c, s) {
                (Variant::Hybrid, Some(c), Some(s)) => {
                    let (c, s) = cfg.cue_dropout.apply(&c, &s, &mut rng);
                    (Some(c), Some(s))
                }
                (_, c, s) => (c, s),
            };
            let (terms, g) = sample_gradients(&model, &sample, Cues::both(c.as_ref(), s.as_ref()))?;
            total.add(terms);
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => {
                    for (name, gi) in g {
                        let dst = a.get_mut(&name).expect("same parameter set");
                        dst.iter_mut().zip(gi).for_each(|(d, x)| *d += x);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        let mut grads = acc.expect("batch_size > 0");
        grads
            .values_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= inv as f32);
        clip_grad_norm(&mut grads, cfg.grad_clip);
        optimizer_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay)?;
        let mean = total.scaled(inv);
        trace.push(TraceRow {
            step,
            lr,
            loss: mean.loss,
            ce_term: mean.ce_term,
            pit_term: mean.pit_term,
        });
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            if let Some(dir) = &opts.out_dir {
                let p = dir.join(format!("step{step:07}.csem"));
                model.save(&p)?;
                checkpoints.push(p);
            }
            if let Some(hook) = opts.on_eval.as_mut() {
                hook(step, &model)?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let p = dir.join("final.csem");
        model.save(&p)?;
        checkpoints.push(p);
        write_loss_trace(dir.join("loss_trace.csv"), &trace)?;
    }
    Ok(TrainOutcome {
        model,
        trace,
        warm_start,
        checkpoints,
    })
}
