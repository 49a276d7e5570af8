//! Dual-path masking network in four variants: plain separator, separator
//! with target prediction, and context / context+speaker extractors.

pub mod checkpoint;
mod config;
mod graph;
mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{hop_size, ModelConfig, Variant};
pub use graph::{AttentionShape, Cues, ForwardGraph, ForwardVars, SegmentLayout};
pub use params::{
    layer_prefix, mask_bias, mask_weight, param_specs, Init, ParamSpec, Parameters, Pass, WarmStart, CUE_CONTEXT,
    CUE_SPEAKER, DECODER, ENCODER, TARGET_BIAS, TARGET_WEIGHT,
};

use crate::autograd::Graph;
use crate::cues::CueEmbedding;
use crate::error::{Error, Result};
use crate::signal::Waveform;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisOrder {
    /// `N × C × D`
    ChunkMajor,
    /// `C × N × D`
    FrameMajor,
}

/// Segmented features plus what is needed to undo the segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkTensor {
    pub data: Tensor<f32>,
    pub axis_order: AxisOrder,
    pub hop: usize,
    pub pad: usize,
}

impl ChunkTensor {
    /// `(N, C, D)` regardless of axis order.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        match (self.data.shape(), self.axis_order) {
            (&[n, c, d], AxisOrder::ChunkMajor) => Ok((n, c, d)),
            (&[c, n, d], AxisOrder::FrameMajor) => Ok((n, c, d)),
            (s, _) => Err(Error::invalid(format!("chunk tensor must be rank 3, got {s:?}"))),
        }
    }

    pub fn layout(&self) -> Result<SegmentLayout> {
        let (n, c, _) = self.dims()?;
        if self.hop == 0 || (n > 1 && self.hop > c) {
            return Err(Error::invalid(format!("hop {} inconsistent with chunk {c}", self.hop)));
        }
        let padded = (n - 1) * self.hop + c;
        if self.pad >= padded {
            return Err(Error::invalid(format!("pad {} leaves no frames", self.pad)));
        }
        Ok(SegmentLayout {
            frames: padded - self.pad,
            padded_frames: padded,
            chunk: c,
            hop: self.hop,
            chunks: n,
        })
    }

    /// The same data in the other axis order.
    pub fn transposed(&self) -> Result<ChunkTensor> {
        let (a, b, d) = match self.data.shape() {
            &[a, b, d] => (a, b, d),
            s => return Err(Error::invalid(format!("chunk tensor must be rank 3, got {s:?}"))),
        };
        let src = self.data.data();
        let mut out = Vec::with_capacity(src.len());
        for j in 0..b {
            for i in 0..a {
                out.extend_from_slice(&src[(i * b + j) * d..(i * b + j + 1) * d]);
            }
        }
        Ok(ChunkTensor {
            data: Tensor::from_vec(&[b, a, d], out),
            axis_order: match self.axis_order {
                AxisOrder::ChunkMajor => AxisOrder::FrameMajor,
                AxisOrder::FrameMajor => AxisOrder::ChunkMajor,
            },
            hop: self.hop,
            pad: self.pad,
        })
    }

    fn chunk_major(&self) -> Result<ChunkTensor> {
        if !self.data.all_finite() {
            return Err(Error::invalid("chunk tensor has non-finite entries"));
        }
        match self.axis_order {
            AxisOrder::ChunkMajor => Ok(self.clone()),
            AxisOrder::FrameMajor => self.transposed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub streams: Vec<Waveform>,
    pub target_logits: Option<Vec<f32>>,
}

impl ModelOutput {
    /// Stream index favoured by the target head, lowest index on ties.
    pub fn predicted_target(&self) -> Option<usize> {
        let z = self.target_logits.as_ref()?;
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        Some(best)
    }
}

fn feature_dims(feature: &Tensor<f32>) -> Result<(usize, usize)> {
    match feature.shape() {
        &[f, d] if f > 0 && d > 0 => Ok((f, d)),
        s => Err(Error::invalid(format!("feature must be [F, D], got {s:?}"))),
    }
}

/// Encoder features `[F, D]` of a waveform.
pub fn encode(w: &Waveform, params: &Parameters, cfg: &ModelConfig) -> Result<Tensor<f32>> {
    let mut fg = ForwardGraph::new(cfg, params)?;
    let v = fg.encode(w.samples())?;
    Ok(fg.graph.value(v).clone())
}

/// Splits `[F, D]` into overlapping chunks of `chunk` frames.
pub fn segment(feature: &Tensor<f32>, chunk: usize, overlap: f64) -> Result<ChunkTensor> {
    let (f, d) = feature_dims(feature)?;
    if !(overlap > 0.0 && overlap < 1.0) {
        return Err(Error::invalid(format!("overlap {overlap} must lie in (0, 1)")));
    }
    let hop = hop_size(chunk, overlap)?;
    let layout = SegmentLayout::new(f, chunk, hop)?;
    let mut g = Graph::new();
    let x = g.constant(feature.clone());
    let y = g.gather(x, graph::chunk_index(layout, d).into(), &[layout.chunks, chunk, d]);
    Ok(ChunkTensor {
        data: g.value(y).clone(),
        axis_order: AxisOrder::ChunkMajor,
        hop,
        pad: layout.pad(),
    })
}

/// Inverse of [`segment`]: averages overlapping frames and strips padding.
pub fn overlap_add(chunks: &ChunkTensor, original_frames: usize) -> Result<Tensor<f32>> {
    let ct = chunks.chunk_major()?;
    let layout = ct.layout()?;
    if layout.frames != original_frames {
        return Err(Error::invalid(format!(
            "chunks describe {} frames, expected {original_frames}",
            layout.frames
        )));
    }
    let (_, _, d) = ct.dims()?;
    let counts = layout.overlap_counts();
    let mut out = vec![0.0f32; layout.frames * d];
    for (&i, &v) in graph::chunk_index(layout, d).iter().zip(ct.data.data()) {
        if i != crate::autograd::NO_INDEX {
            out[i as usize] += v;
        }
    }
    for (f, row) in out.chunks_mut(d).enumerate() {
        let inv = 1.0 / counts[f] as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::from_vec(&[layout.frames, d], out))
}

fn chunk_var(fg: &mut ForwardGraph<f32>, x: &ChunkTensor) -> Result<(crate::autograd::Var, SegmentLayout)> {
    let ct = x.chunk_major()?;
    let layout = ct.layout()?;
    Ok((fg.graph.constant(ct.data), layout))
}

/// One Intra+Inter block with the given projected cue vectors (each `[D]`)
/// prepended at every layer.
pub fn dual_path_block(
    x: &ChunkTensor,
    cues: &[Vec<f32>],
    params: &Parameters,
    cfg: &ModelConfig,
    block: usize,
) -> Result<ChunkTensor> {
    if cues.len() > 2 {
        return Err(Error::invalid(format!("at most two cues, got {}", cues.len())));
    }
    let mut fg = ForwardGraph::new(cfg, params)?;
    let (v, _) = chunk_var(&mut fg, x)?;
    let mut cue_vars = Vec::with_capacity(cues.len());
    for c in cues {
        if c.len() != cfg.embed_dim {
            return Err(Error::invalid(format!(
                "cue vector has dimension {}, expected {}",
                c.len(),
                cfg.embed_dim
            )));
        }
        cue_vars.push(fg.graph.constant(Tensor::from_vec(&[c.len()], c.clone())));
    }
    let (out, _) = fg.dual_path_block(v, &cue_vars, block, false)?;
    let res = ChunkTensor {
        data: fg.graph.value(out).clone(),
        axis_order: AxisOrder::ChunkMajor,
        hop: x.hop,
        pad: x.pad,
    };
    match x.axis_order {
        AxisOrder::ChunkMajor => Ok(res),
        AxisOrder::FrameMajor => res.transposed(),
    }
}

/// Non-negative masks `[F, D]`, one per stream.
pub fn predict_masks(
    h: &ChunkTensor,
    n_streams: usize,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<Vec<Tensor<f32>>> {
    if n_streams != cfg.output_streams() {
        return Err(Error::invalid(format!(
            "{} variant predicts {} masks, asked for {n_streams}",
            cfg.variant,
            cfg.output_streams()
        )));
    }
    let mut fg = ForwardGraph::new(cfg, params)?;
    let (v, layout) = chunk_var(&mut fg, h)?;
    let masks = fg.predict_masks(v, layout, n_streams);
    Ok(masks.into_iter().map(|m| fg.graph.value(m).clone()).collect())
}

/// Target logits from the `[C, D]` cue slice of the final Inter layer.
pub fn predict_target_logits(head: &Tensor<f32>, params: &Parameters, cfg: &ModelConfig) -> Result<Vec<f32>> {
    let mut fg = ForwardGraph::new(cfg, params)?;
    let v = fg.graph.constant(head.clone());
    let z = fg.predict_target_logits(v)?;
    Ok(fg.graph.value(z).data().to_vec())
}

/// Full inference pass.
pub fn forward(
    mixture: &Waveform,
    context: Option<&CueEmbedding>,
    speaker: Option<&CueEmbedding>,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<ModelOutput> {
    let mut fg = ForwardGraph::new(cfg, params)?;
    let vars = fg.run(mixture.samples(), Cues::both(context, speaker))?;
    let streams = vars
        .streams
        .iter()
        .map(|&s| Waveform::new(fg.graph.value(s).data().to_vec(), mixture.sample_rate()))
        .collect::<Result<Vec<_>>>()?;
    let target_logits = vars.target_logits.map(|z| fg.graph.value(z).data().to_vec());
    Ok(ModelOutput {
        streams,
        target_logits,
    })
}

/// Configuration and weights together.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Model { config, params })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, params) = load_checkpoint(path)?;
        Ok(Model { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    pub fn forward(&self, mixture: &Waveform, cues: Cues<'_>) -> Result<ModelOutput> {
        forward(mixture, cues.context, cues.speaker, &self.params, &self.config)
    }

    /// Copies overlapping tensors from `source`; new heads stay freshly
    /// initialized.
    pub fn warm_start(&mut self, source: &Model) -> Result<WarmStart> {
        self.params.warm_start_from(&source.params)
    }
}
