//! Differentiable forward pass of the dual-path masking network.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::config::{ModelConfig, Variant};
use super::params::{self, layer_prefix, param_specs, pass_norm_prefix, Parameters, Pass};
use crate::autograd::{Graph, Var, NO_INDEX};
use crate::cues::{CueEmbedding, CueKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const MASKED_SCORE: f64 = -1e9;

/// Geometry of a chunked feature sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    pub frames: usize,
    pub padded_frames: usize,
    pub chunk: usize,
    pub hop: usize,
    pub chunks: usize,
}

impl SegmentLayout {
    /// Smallest `F' >= max(F, C)` with `(F' - C)` a multiple of `hop`.
    pub fn new(frames: usize, chunk: usize, hop: usize) -> Result<Self> {
        if chunk == 0 || hop == 0 || frames == 0 {
            return Err(Error::invalid("frames, chunk and hop must be positive"));
        }
        let padded_frames = if frames <= chunk {
            chunk
        } else {
            chunk + (frames - chunk).div_ceil(hop) * hop
        };
        Ok(SegmentLayout {
            frames,
            padded_frames,
            chunk,
            hop,
            chunks: (padded_frames - chunk) / hop + 1,
        })
    }

    pub fn pad(&self) -> usize {
        self.padded_frames - self.frames
    }

    /// Number of chunk positions covering each real frame.
    pub fn overlap_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.frames];
        for n in 0..self.chunks {
            for c in 0..self.chunk {
                if let Some(v) = counts.get_mut(n * self.hop + c) {
                    *v += 1;
                }
            }
        }
        counts
    }
}

/// Sequence length seen by one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub pass: Pass,
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
}

/// Conditioning inputs to one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Cues<'a> {
    pub context: Option<&'a CueEmbedding>,
    pub speaker: Option<&'a CueEmbedding>,
}

impl<'a> Cues<'a> {
    pub fn none() -> Self {
        Cues::default()
    }

    pub fn context(c: &'a CueEmbedding) -> Self {
        Cues {
            context: Some(c),
            speaker: None,
        }
    }

    pub fn both(c: Option<&'a CueEmbedding>, s: Option<&'a CueEmbedding>) -> Self {
        Cues {
            context: c,
            speaker: s,
        }
    }
}

/// Graph handles produced by [`ForwardGraph::run`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub streams: Vec<Var>,
    pub target_logits: Option<Var>,
}

/// A graph with every parameter registered as a trainable leaf, plus the
/// building blocks of the network.
pub struct ForwardGraph<T> {
    pub graph: Graph<T>,
    cfg: ModelConfig,
    vars: BTreeMap<String, Var>,
    trace: Vec<AttentionShape>,
}

fn iota(n: usize) -> std::ops::Range<u32> {
    0..n as u32
}

/// Flat feature index of every `[N, C, D]` chunk entry, `NO_INDEX` in the
/// padded tail. Gathering with it segments; scattering with it overlap-adds.
pub(crate) fn chunk_index(layout: SegmentLayout, d: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(layout.chunks * layout.chunk * d);
    for n in 0..layout.chunks {
        for c in 0..layout.chunk {
            let frame = n * layout.hop + c;
            for j in 0..d {
                index.push(if frame < layout.frames {
                    (frame * d + j) as u32
                } else {
                    NO_INDEX
                });
            }
        }
    }
    index
}

fn sinusoid<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for j in 0..d {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            data.push(T::lit(if j % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[len, d], data)
}

impl<T: Scalar> ForwardGraph<T> {
    pub fn new(cfg: &ModelConfig, params: &Parameters<T>) -> Result<Self> {
        cfg.validate()?;
        let mut graph = Graph::new();
        let mut vars = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            vars.insert(spec.name, graph.param(t.clone()));
        }
        Ok(ForwardGraph {
            graph,
            cfg: cfg.clone(),
            vars,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn trace(&self) -> &[AttentionShape] {
        &self.trace
    }

    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn d(&self) -> usize {
        self.cfg.embed_dim
    }

    /// Framed 1-D convolution followed by ReLU: `[T] -> [F, D]`.
    pub fn encode(&mut self, samples: &[T]) -> Result<Var> {
        let (k, s) = (self.cfg.encoder_kernel, self.cfg.encoder_stride);
        let f = self.cfg.frames_for(samples.len()).ok_or_else(|| {
            Error::invalid(format!(
                "input of {} samples is shorter than the encoder kernel {k}",
                samples.len()
            ))
        })?;
        let mut frames = Vec::with_capacity(f * k);
        for i in 0..f {
            frames.extend_from_slice(&samples[i * s..i * s + k]);
        }
        let x = self.graph.constant(Tensor::from_vec(&[f, k], frames));
        let y = self.graph.matmul(x, self.p(params::ENCODER), false, false);
        Ok(self.graph.relu(y))
    }

    /// Linear projection of a cue to `[D]`; an absent cue projects to zero.
    pub fn project_cue(&mut self, cue: &CueEmbedding) -> Result<Var> {
        let (name, dim) = match cue.kind() {
            CueKind::Context => (params::CUE_CONTEXT, self.cfg.context_dim),
            CueKind::Speaker => (params::CUE_SPEAKER, self.cfg.speaker_dim),
        };
        if !self.vars.contains_key(name) {
            return Err(Error::invalid(format!(
                "{} variant has no {} cue",
                self.cfg.variant,
                cue.kind()
            )));
        }
        if cue.dim() != dim {
            return Err(Error::invalid(format!(
                "{} cue has dimension {}, expected {dim}",
                cue.kind(),
                cue.dim()
            )));
        }
        let d = self.d();
        if !cue.is_present() {
            return Ok(self.graph.constant(Tensor::zeros(&[d])));
        }
        let v: Vec<T> = cue.vector().iter().map(|&x| T::lit(x as f64)).collect();
        let v = self.graph.constant(Tensor::from_vec(&[1, dim], v));
        let out = self.graph.matmul(v, self.p(name), false, false);
        Ok(self.graph.reshape(out, &[d]))
    }

    /// Projected cue vectors in prepend order, validated against the variant.
    pub fn cue_vars(&mut self, cues: Cues<'_>) -> Result<Vec<Var>> {
        let variant = self.cfg.variant;
        for (slot, c) in [(CueKind::Context, cues.context), (CueKind::Speaker, cues.speaker)] {
            if let Some(c) = c {
                if c.kind() != slot {
                    return Err(Error::invalid(format!("{} cue passed as {slot} cue", c.kind())));
                }
            }
        }
        let d = self.d();
        match variant {
            Variant::Separator => {
                if cues.context.is_some() || cues.speaker.is_some() {
                    return Err(Error::invalid("separator variant takes no cues"));
                }
                Ok(Vec::new())
            }
            Variant::ContSep | Variant::Context => {
                if cues.speaker.is_some() {
                    return Err(Error::invalid(format!("{variant} variant takes no speaker cue")));
                }
                let c = cues
                    .context
                    .ok_or_else(|| Error::invalid(format!("{variant} variant requires a context cue")))?;
                Ok(vec![self.project_cue(c)?])
            }
            Variant::Hybrid => {
                let mut out = Vec::with_capacity(2);
                for c in [cues.context, cues.speaker] {
                    out.push(match c {
                        Some(c) => self.project_cue(c)?,
                        None => self.graph.constant(Tensor::zeros(&[d])),
                    });
                }
                Ok(out)
            }
        }
    }

    /// `[F, D] -> [N, C, D]`, zero-padding the tail.
    pub fn segment(&mut self, feat: Var) -> Result<(Var, SegmentLayout)> {
        let (f, d) = match self.graph.shape(feat) {
            &[f, d] => (f, d),
            s => return Err(Error::invalid(format!("segment expects [F, D], got {s:?}"))),
        };
        let layout = SegmentLayout::new(f, self.cfg.chunk_size, self.cfg.hop())?;
        let x = self.segment_with(feat, layout, d);
        Ok((x, layout))
    }

    pub(crate) fn segment_with(&mut self, feat: Var, layout: SegmentLayout, d: usize) -> Var {
        self.graph
            .gather(feat, chunk_index(layout, d).into(), &[layout.chunks, layout.chunk, d])
    }

    /// `[N, C, D] -> [F, D]`: sums overlapping frames, divides by the overlap
    /// count and drops padding.
    pub fn overlap_add(&mut self, chunks: Var, layout: SegmentLayout) -> Var {
        let d = *self.graph.shape(chunks).last().expect("rank-3 chunks");
        let index = chunk_index(layout, d);
        let summed = self.graph.scatter_add(chunks, index.into(), &[layout.frames, d]);
        let inv: Vec<T> = layout
            .overlap_counts()
            .iter()
            .flat_map(|&c| std::iter::repeat(T::one() / T::lit(c as f64)).take(d))
            .collect();
        let inv = self.graph.constant(Tensor::from_vec(&[layout.frames, d], inv));
        self.graph.mul_broadcast(summed, inv)
    }

    /// `[A, B, D] -> [B, A, D]`.
    fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Var {
        let d = self.d();
        let mut index = Vec::with_capacity(a * b * d);
        for j in 0..b {
            for i in 0..a {
                let base = (i * b + j) * d;
                index.extend(iota(d).map(|e| base as u32 + e));
            }
        }
        self.graph.gather(x, index.into(), &[b, a, d])
    }

    /// `[B, L, D]` plus `k` cue vectors → `[B, k + L, D]` with cues first.
    fn prepend(&mut self, x: Var, cues: &[Var], rows: usize, len: usize) -> Var {
        let d = self.d();
        let k = cues.len();
        let mut parts = vec![x];
        parts.extend_from_slice(cues);
        let flat = self.graph.concat(&parts);
        let cue_base = rows * len * d;
        let mut index = Vec::with_capacity(rows * (len + k) * d);
        for r in 0..rows {
            for p in 0..k {
                index.extend(iota(d).map(|e| (cue_base + p * d) as u32 + e));
            }
            index.extend(iota(len * d).map(|e| (r * len * d) as u32 + e));
        }
        self.graph.gather(flat, index.into(), &[rows, len + k, d])
    }

    /// Removes the first `k` positions of every row.
    fn drop_prefix(&mut self, x: Var, k: usize, rows: usize, len: usize) -> Var {
        let d = self.d();
        let mut index = Vec::with_capacity(rows * len * d);
        for r in 0..rows {
            let base = (r * (len + k) + k) * d;
            index.extend(iota(len * d).map(|e| base as u32 + e));
        }
        self.graph.gather(x, index.into(), &[rows, len, d])
    }

    /// Pre-norm transformer layer on `[B, L, D]`; `cue_len` leading positions
    /// are hidden from attention keys when cue masking is enabled.
    fn transformer_layer(&mut self, z: Var, rows: usize, len: usize, cue_len: usize, prefix: &str) -> Var {
        let d = self.d();
        let h = self.cfg.num_heads;
        let dh = d / h;
        let p = |s: &str| format!("{prefix}.{s}");

        let u = self
            .graph
            .layer_norm(z, self.p(&p("ln1.weight")), self.p(&p("ln1.bias")), LN_EPS);
        let u = self.graph.reshape(u, &[rows * len, d]);
        let qkv = self.graph.matmul(u, self.p(&p("attn.qkv.weight")), false, false);
        let qkv = self.graph.add_broadcast(qkv, self.p(&p("attn.qkv.bias")));

        let split = |offset: usize| -> Rc<[u32]> {
            let mut index = Vec::with_capacity(rows * len * d);
            for b in 0..rows {
                for head in 0..h {
                    for l in 0..len {
                        let base = (b * len + l) * 3 * d + offset + head * dh;
                        index.extend(iota(dh).map(|e| base as u32 + e));
                    }
                }
            }
            index.into()
        };
        let heads = [rows * h, len, dh];
        let q = self.graph.gather(qkv, split(0), &heads);
        let k = self.graph.gather(qkv, split(d), &heads);
        let v = self.graph.gather(qkv, split(2 * d), &heads);

        let scores = self.graph.matmul(q, k, false, true);
        let mut scores = self.graph.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        if self.cfg.mask_cue_keys && cue_len > 0 {
            let mask: Vec<T> = (0..len * len)
                .map(|i| {
                    if i % len < cue_len {
                        T::lit(MASKED_SCORE)
                    } else {
                        T::zero()
                    }
                })
                .collect();
            let mask = self.graph.constant(Tensor::from_vec(&[len, len], mask));
            scores = self.graph.add_broadcast(scores, mask);
        }
        let attn = self.graph.softmax(scores);
        let ctx = self.graph.matmul(attn, v, false, false);

        let mut index = Vec::with_capacity(rows * len * d);
        for b in 0..rows {
            for l in 0..len {
                for head in 0..h {
                    let base = ((b * h + head) * len + l) * dh;
                    index.extend(iota(dh).map(|e| base as u32 + e));
                }
            }
        }
        let merged = self.graph.gather(ctx, index.into(), &[rows * len, d]);
        let o = self.graph.matmul(merged, self.p(&p("attn.out.weight")), false, false);
        let o = self.graph.add_broadcast(o, self.p(&p("attn.out.bias")));
        let o = self.graph.reshape(o, &[rows, len, d]);
        let h1 = self.graph.add(z, o);

        let u = self
            .graph
            .layer_norm(h1, self.p(&p("ln2.weight")), self.p(&p("ln2.bias")), LN_EPS);
        let u = self.graph.reshape(u, &[rows * len, d]);
        let f = self.graph.matmul(u, self.p(&p("ff.in.weight")), false, false);
        let f = self.graph.add_broadcast(f, self.p(&p("ff.in.bias")));
        let f = self.graph.relu(f);
        let f = self.graph.matmul(f, self.p(&p("ff.out.weight")), false, false);
        let f = self.graph.add_broadcast(f, self.p(&p("ff.out.bias")));
        let f = self.graph.reshape(f, &[rows, len, d]);
        self.graph.add(h1, f)
    }

    /// One Intra or Inter pass over `[B, L, D]` with residual around the
    /// whole pass. With `keep_head`, also returns the first cue position of
    /// the last layer's output as `[B, D]`.
    fn run_pass(
        &mut self,
        x: Var,
        pass: Pass,
        block: usize,
        rows: usize,
        len: usize,
        cues: &[Var],
        keep_head: bool,
    ) -> (Var, Option<Var>) {
        let d = self.d();
        let k = cues.len();
        let pe = self.graph.constant(sinusoid(len, d));
        let mut cur = self.graph.add_broadcast(x, pe);
        let mut head = None;
        for layer in 0..self.cfg.layers_per_pass {
            let z = if k > 0 {
                self.prepend(cur, cues, rows, len)
            } else {
                cur
            };
            self.trace.push(AttentionShape {
                pass,
                batch: rows,
                len: len + k,
                dim: d,
            });
            let out = self.transformer_layer(z, rows, len + k, k, &layer_prefix(block, pass, layer));
            if k > 0 {
                if keep_head && layer + 1 == self.cfg.layers_per_pass {
                    let mut index = Vec::with_capacity(rows * d);
                    for r in 0..rows {
                        index.extend(iota(d).map(|e| (r * (len + k) * d) as u32 + e));
                    }
                    head = Some(self.graph.gather(out, index.into(), &[rows, d]));
                }
                cur = self.drop_prefix(out, k, rows, len);
            } else {
                cur = out;
            }
        }
        let np = pass_norm_prefix(block, pass);
        let normed = self.graph.layer_norm(
            cur,
            self.p(&format!("{np}.weight")),
            self.p(&format!("{np}.bias")),
            LN_EPS,
        );
        (self.graph.add(x, normed), head)
    }

    /// Intra pass on `[N, C, D]`, then Inter pass on the `[C, N, D]` view.
    /// Returns `[N, C, D]` and, with `keep_head`, the `[C, D]` cue slice of
    /// the final Inter layer.
    pub fn dual_path_block(&mut self, x: Var, cues: &[Var], block: usize, keep_head: bool) -> Result<(Var, Option<Var>)> {
        let (n, c) = match self.graph.shape(x) {
            &[n, c, d] if d == self.d() => (n, c),
            s => {
                return Err(Error::invalid(format!(
                    "dual-path block expects [N, C, {}], got {s:?}",
                    self.d()
                )))
            }
        };
        for &cv in cues {
            if self.graph.shape(cv) != [self.d()] {
                return Err(Error::invalid(format!(
                    "cue vector has shape {:?}, expected [{}]",
                    self.graph.shape(cv),
                    self.d()
                )));
            }
        }
        if block >= self.cfg.num_blocks {
            return Err(Error::invalid(format!("block {block} out of range")));
        }
        let (intra, _) = self.run_pass(x, Pass::Intra, block, n, c, cues, false);
        let t = self.swap_axes(intra, n, c);
        let (inter, head) = self.run_pass(t, Pass::Inter, block, c, n, cues, keep_head);
        Ok((self.swap_axes(inter, c, n), head))
    }

    /// Per-stream masks `[F, D]`: linear head, overlap-add, ReLU.
    pub fn predict_masks(&mut self, h: Var, layout: SegmentLayout, streams: usize) -> Vec<Var> {
        let d = self.d();
        let rows = layout.chunks * layout.chunk;
        let flat = self.graph.reshape(h, &[rows, d]);
        (0..streams)
            .map(|s| {
                let m = self.graph.matmul(flat, self.p(&params::mask_weight(s)), false, false);
                let m = self.graph.add_broadcast(m, self.p(&params::mask_bias(s)));
                let m = self.graph.reshape(m, &[layout.chunks, layout.chunk, d]);
                let m = self.overlap_add(m, layout);
                self.graph.relu(m)
            })
            .collect()
    }

    /// Mean over the chunk axis of a `[C, D]` slice, then a linear map to `n`
    /// logits.
    pub fn predict_target_logits(&mut self, head: Var) -> Result<Var> {
        if self.cfg.variant != Variant::ContSep {
            return Err(Error::InvalidState(format!(
                "{} variant has no target head",
                self.cfg.variant
            )));
        }
        let c = match self.graph.shape(head) {
            &[c, d] if d == self.d() => c,
            s => return Err(Error::invalid(format!("target head expects [C, D], got {s:?}"))),
        };
        let mean = self
            .graph
            .constant(Tensor::from_vec(&[1, c], vec![T::one() / T::lit(c as f64); c]));
        let pooled = self.graph.matmul(mean, head, false, false);
        let z = self.graph.matmul(pooled, self.p(params::TARGET_WEIGHT), false, false);
        let z = self.graph.add_broadcast(z, self.p(params::TARGET_BIAS));
        Ok(self.graph.reshape(z, &[self.cfg.num_streams]))
    }

    /// Transposed convolution back to `len` samples.
    pub fn decode(&mut self, masked: Var, len: usize) -> Var {
        let f = self.graph.shape(masked)[0];
        let (k, s) = (self.cfg.encoder_kernel, self.cfg.encoder_stride);
        let frames = self.graph.matmul(masked, self.p(params::DECODER), false, false);
        let index: Vec<u32> = (0..f)
            .flat_map(|i| {
                (0..k).map(move |j| {
                    let t = i * s + j;
                    if t < len {
                        t as u32
                    } else {
                        NO_INDEX
                    }
                })
            })
            .collect();
        self.graph.scatter_add(frames, index.into(), &[len])
    }

    /// Full network: encode, chunk, dual-path blocks with cue injection,
    /// masks, decode.
    pub fn run(&mut self, samples: &[T], cues: Cues<'_>) -> Result<ForwardVars> {
        let cue_vars = self.cue_vars(cues)?;
        self.run_with_cue_vars(samples, &cue_vars)
    }

    /// As [`Self::run`] with already-projected cue vectors.
    pub fn run_with_cue_vars(&mut self, samples: &[T], cue_vars: &[Var]) -> Result<ForwardVars> {
        let contsep = self.cfg.variant == Variant::ContSep;
        let enc = self.encode(samples)?;
        let (mut h, layout) = self.segment(enc)?;
        let mut head = None;
        for b in 0..self.cfg.num_blocks {
            let last = b + 1 == self.cfg.num_blocks;
            let (out, hd) = self.dual_path_block(h, cue_vars, b, last && contsep)?;
            h = out;
            if hd.is_some() {
                head = hd;
            }
        }
        let masks = self.predict_masks(h, layout, self.cfg.output_streams());
        let streams = masks
            .into_iter()
            .map(|m| {
                let masked = self.graph.mul_broadcast(m, enc);
                self.decode(masked, samples.len())
            })
            .collect();
        let target_logits = match head {
            Some(hd) => Some(self.predict_target_logits(hd)?),
            None => None,
        };
        Ok(ForwardVars {
            streams,
            target_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        let l = SegmentLayout::new(8, 4, 2).unwrap();
        assert_eq!((l.chunks, l.padded_frames), (3, 8));
        let l = SegmentLayout::new(5, 4, 2).unwrap();
        assert_eq!((l.chunks, l.padded_frames, l.pad()), (2, 6, 1));
        let l = SegmentLayout::new(4, 4, 2).unwrap();
        assert_eq!((l.chunks, l.pad()), (1, 0));
        let l = SegmentLayout::new(3, 4, 2).unwrap();
        assert_eq!((l.chunks, l.pad()), (1, 1));
    }

    #[test]
    fn overlap_counts_enumerated() {
        let l = SegmentLayout::new(8, 4, 2).unwrap();
        assert_eq!(l.overlap_counts(), vec![1, 1, 2, 2, 2, 2, 1, 1]);
    }

    #[test]
    fn sinusoid_first_rows() {
        let pe: Tensor<f64> = sinusoid(2, 4);
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.data()[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
