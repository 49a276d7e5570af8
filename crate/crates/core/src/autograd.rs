//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients for every node that depends
//! on a trainable leaf. Index-driven ops ([`Graph::gather`],
//! [`Graph::scatter_add`]) express all the reshaping the separator needs
//! (segmentation, transposes, head splits, overlap-add) with one backward rule.

use std::rc::Rc;

use crate::tensor::{gemm_batched, MatLayout, Scalar, Tensor};

/// Index value meaning "no source" for gather and "discard" for scatter.
pub const NO_INDEX: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulSpec {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, spec: MatMulSpec },
    Add(Var, Var),
    AddBroadcast { x: Var, b: Var },
    MulBroadcast { x: Var, b: Var },
    Scale(Var, T),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Gather { x: Var, index: Rc<[u32]> },
    ScatterAdd { x: Var, index: Rc<[u32]> },
    Concat(Vec<Var>),
    Reshape(Var),
    SiSnrLoss { est: Var, reference: Rc<[T]>, eps: T },
    CrossEntropy { logits: Var, target: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence it through any trainable path.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Batched matrix product. Operands are rank 2 (`[m,k]·[k,n]`) or rank 3
    /// with a shared leading batch axis. `ta`/`tb` mean the stored matrix is
    /// the transpose of the operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), sb.len(), "matmul rank mismatch {sa:?} {sb:?}");
        let (batch, ra, rb) = match sa.len() {
            2 => (1, &sa[..], &sb[..]),
            3 => {
                assert_eq!(sa[0], sb[0], "matmul batch mismatch {sa:?} {sb:?}");
                (sa[0], &sa[1..], &sb[1..])
            }
            r => panic!("matmul on rank {r}"),
        };
        let (m, k) = if ta { (ra[1], ra[0]) } else { (ra[0], ra[1]) };
        let (k2, n) = if tb { (rb[1], rb[0]) } else { (rb[0], rb[1]) };
        assert_eq!(k, k2, "matmul inner dims {sa:?} {sb:?} ta={ta} tb={tb}");
        let mut out = vec![T::zero(); batch * m * n];
        gemm_batched(
            batch,
            m,
            k,
            n,
            self.value(a).data(),
            MatLayout { transposed: ta },
            m * k,
            self.value(b).data(),
            MatLayout { transposed: tb },
            k * n,
            &mut out,
            false,
        );
        let shape = if batch == 1 && sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let ng = self.ng(a) || self.ng(b);
        let spec = MatMulSpec {
            batch,
            m,
            k,
            n,
            ta,
            tb,
        };
        self.push(Tensor::from_vec(&shape, out), Op::MatMul { a, b, spec }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), ng)
    }

    /// `x + b` where `b` repeats along the leading axes of `x`
    /// (`x.len()` must be a multiple of `b.len()`).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        let bl = self.value(b).len();
        assert!(bl > 0 && self.value(x).len() % bl == 0, "add_broadcast size");
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % bl])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), Op::AddBroadcast { x, b }, ng)
    }

    /// Element-wise `x * b` with the same repetition rule as [`Self::add_broadcast`].
    pub fn mul_broadcast(&mut self, x: Var, b: Var) -> Var {
        let bl = self.value(b).len();
        assert!(bl > 0 && self.value(x).len() % bl == 0, "mul_broadcast size");
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bd[i % bl])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data), Op::MulBroadcast { x, b }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, data), Op::Relu(x), ng)
    }

    /// Layer normalization over the last axis, per position.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = *self.shape(x).last().expect("layer_norm on scalar");
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("softmax on scalar");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in dst.iter_mut() {
                *o /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&shape, out), Op::Softmax(x), ng)
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == NO_INDEX`.
    pub fn gather(&mut self, x: Var, index: Rc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather shape");
        let xv = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| {
                if i == NO_INDEX {
                    T::zero()
                } else {
                    xv[i as usize]
                }
            })
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(shape, data), Op::Gather { x, index }, ng)
    }

    /// `out[index[j]] += x[j]`, dropping entries where `index[j] == NO_INDEX`.
    pub fn scatter_add(&mut self, x: Var, index: Rc<[u32]>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), self.value(x).len(), "scatter index length");
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&i, &v) in index.iter().zip(self.value(x).data()) {
            if i != NO_INDEX {
                out[i as usize] += v;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(shape, out), Op::ScatterAdd { x, index }, ng)
    }

    /// Flat concatenation; result has shape `[total]`.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let n = data.len();
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::from_vec(&[n], data), Op::Concat(xs.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Contiguous flat slice `[start, start + prod(shape))`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let index: Rc<[u32]> = (start..start + n).map(|i| i as u32).collect();
        self.gather(x, index, shape)
    }

    /// Negative SI-SNR in dB of estimate `est` against a fixed reference.
    pub fn si_snr_loss(&mut self, est: Var, reference: Rc<[T]>, eps: f64) -> Var {
        assert_eq!(self.value(est).len(), reference.len(), "si_snr length");
        let eps = T::lit(eps);
        let v = si_snr_loss_value(self.value(est).data(), &reference, eps);
        let ng = self.ng(est);
        self.push(
            Tensor::scalar(v),
            Op::SiSnrLoss {
                est,
                reference,
                eps,
            },
            ng,
        )
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits).data();
        assert!(target < z.len(), "cross_entropy target out of range");
        let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = z.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        let v = lse - z[target];
        let ng = self.ng(logits);
        self.push(Tensor::scalar(v), Op::CrossEntropy { logits, target }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, spec } => {
                let MatMulSpec {
                    batch,
                    m,
                    k,
                    n,
                    ta,
                    tb,
                } = *spec;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let plain = MatLayout { transposed: false };
                let tr = MatLayout { transposed: true };
                if self.ng(*a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    if !ta {
                        gemm_batched(
                            batch,
                            m,
                            n,
                            k,
                            g,
                            plain,
                            m * n,
                            bv,
                            MatLayout { transposed: !tb },
                            k * n,
                            ga,
                            true,
                        );
                    } else {
                        gemm_batched(
                            batch,
                            k,
                            n,
                            m,
                            bv,
                            MatLayout { transposed: tb },
                            k * n,
                            g,
                            tr,
                            m * n,
                            ga,
                            true,
                        );
                    }
                }
                if self.ng(*b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    if !tb {
                        gemm_batched(
                            batch,
                            k,
                            m,
                            n,
                            av,
                            MatLayout { transposed: !ta },
                            m * k,
                            g,
                            plain,
                            m * n,
                            gb,
                            true,
                        );
                    } else {
                        gemm_batched(
                            batch,
                            n,
                            m,
                            k,
                            g,
                            tr,
                            m * n,
                            av,
                            MatLayout { transposed: ta },
                            m * k,
                            gb,
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if self.ng(*b) {
                    let bl = self.value(*b).len();
                    let gb = accumulate(&mut grads[b.0], bl);
                    for blk in g.chunks(bl) {
                        gb.iter_mut().zip(blk).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::MulBroadcast { x, b } => {
                let xv = self.value(*x).data();
                let bv = self.value(*b).data();
                let bl = bv.len();
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i] * bv[i % bl];
                    }
                }
                if self.ng(*b) {
                    let gb = accumulate(&mut grads[b.0], bl);
                    for (i, (&d, &xi)) in g.iter().zip(xv).enumerate() {
                        gb[i % bl] += d * xi;
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d * *s);
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let out = node.value.data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((o, &d), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *o += d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gm = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], d);
                    for (i, (&dy, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += dy * h;
                    }
                }
                if self.ng(*beta) {
                    let gb = accumulate(&mut grads[beta.0], d);
                    for (i, &dy) in g.iter().enumerate() {
                        gb[i % d] += dy;
                    }
                }
                if self.ng(*x) {
                    let dn = T::lit(d as f64);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let h = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gy[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= dn;
                        mean_dh_h /= dn;
                        for j in 0..d {
                            let dh = gy[j] * gm[j];
                            gx[r * d + j] += rs * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.ng(*x) {
                    let d = *node.value.shape().last().unwrap();
                    let y = node.value.data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for ((gy, yy), o) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                        let dot: T = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            o[j] += yy[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], self.value(*x).len());
                    for (&i, &d) in index.iter().zip(g) {
                        if i != NO_INDEX {
                            gx[i as usize] += d;
                        }
                    }
                }
            }
            Op::ScatterAdd { x, index } => {
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], index.len());
                    for (o, &i) in gx.iter_mut().zip(index.iter()) {
                        if i != NO_INDEX {
                            *o += g[i as usize];
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for x in xs {
                    let l = self.value(*x).len();
                    if self.ng(*x) {
                        let gx = accumulate(&mut grads[x.0], l);
                        gx.iter_mut()
                            .zip(&g[off..off + l])
                            .for_each(|(o, &d)| *o += d);
                    }
                    off += l;
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
            }
            Op::SiSnrLoss {
                est,
                reference,
                eps,
            } => {
                if self.ng(*est) {
                    let e = self.value(*est).data();
                    let gx = accumulate(&mut grads[est.0], e.len());
                    si_snr_loss_grad(e, reference, *eps, g[0], gx);
                }
            }
            Op::CrossEntropy { logits, target } => {
                if self.ng(*logits) {
                    let z = self.value(*logits).data();
                    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
                    let ex: Vec<T> = z.iter().map(|&v| (v - mx).exp()).collect();
                    let s: T = ex.iter().copied().sum();
                    let gz = accumulate(&mut grads[logits.0], z.len());
                    for (j, o) in gz.iter_mut().enumerate() {
                        let p = ex[j] / s;
                        let onehot = if j == *target { T::one() } else { T::zero() };
                        *o += g[0] * (p - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                if self.ng(*x) {
                    let gx = accumulate(&mut grads[x.0], self.value(*x).len());
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
    }
}

struct SiSnrParts<T> {
    alpha: T,
    target_energy: T,
    noise_energy: T,
}

fn si_snr_parts<T: Scalar>(est: &[T], reference: &[T]) -> SiSnrParts<T> {
    let dot: T = est.iter().zip(reference).map(|(&a, &b)| a * b).sum();
    let ref_energy: T = reference.iter().map(|&v| v * v).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let noise_energy = est
        .iter()
        .zip(reference)
        .map(|(&e, &r)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    SiSnrParts {
        alpha,
        target_energy,
        noise_energy,
    }
}

/// `-10·log10((‖ȳ‖² + eps) / (‖ε‖² + eps))` with `ȳ = (⟨ŷ,y⟩/‖y‖²)·y`, `ε = ŷ − ȳ`.
pub fn si_snr_loss_value<T: Scalar>(est: &[T], reference: &[T], eps: T) -> T {
    let p = si_snr_parts(est, reference);
    let ten = T::lit(10.0);
    -ten * ((p.target_energy + eps) / (p.noise_energy + eps)).log10()
}

fn si_snr_loss_grad<T: Scalar>(est: &[T], reference: &[T], eps: T, upstream: T, out: &mut [T]) {
    let p = si_snr_parts(est, reference);
    let two = T::lit(2.0);
    let c = -T::lit(10.0 / std::f64::consts::LN_10) * upstream;
    let wa = c / (p.target_energy + eps);
    let wb = -c / (p.noise_energy + eps);
    for ((o, &e), &r) in out.iter_mut().zip(est).zip(reference) {
        // d‖ȳ‖²/dŷ = 2αy, d‖ε‖²/dŷ = 2(ŷ − αy)
        let da = two * p.alpha * r;
        let db = two * (e - p.alpha * r);
        *o += wa * da + wb * db;
    }
}
