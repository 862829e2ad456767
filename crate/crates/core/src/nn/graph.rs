//! Execution backends for the small networks in this crate.
//!
//! Network code is written once against [`Exec`]. [`Eager`] evaluates
//! immediately and keeps nothing; [`Tape`] records every intermediate so
//! that [`Tape::backward`] can run reverse-mode differentiation. Parameter
//! gradients are accumulated per *slot*: a conv layer passed with
//! `Some(slot)` is trainable, one passed with `None` is frozen but still
//! propagates gradients to its input.

use std::rc::Rc;

use crate::error::{Result, TcvcError};
use crate::flow::SamplingPlan;
use crate::nn::conv::{Conv2d, ConvGrad};
use crate::tensor::Tensor;

pub trait Exec<'a> {
    type Var: Clone;

    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn value<'s>(&'s self, v: &'s Self::Var) -> &'s Tensor;

    fn conv(&mut self, x: &Self::Var, layer: &'a Conv2d, slot: Option<usize>) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var;
    fn tanh(&mut self, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, xs: &[&Self::Var]) -> Result<Self::Var>;
    /// `w ⊙ f + (1 − w) ⊙ b`, with the single-channel `w` broadcast over channels.
    fn blend(&mut self, f: &Self::Var, b: &Self::Var, w: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn warp(&mut self, x: &Self::Var, plan: &'a SamplingPlan) -> Result<Self::Var>;
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn blend_values(f: &Tensor, b: &Tensor, w: &Tensor) -> Result<Tensor> {
    b.ensure_dims(f.dims(), "blend")?;
    if w.channels() != 1 {
        return Err(TcvcError::shape("blend weight", "1 channel", w.channels()));
    }
    w.ensure_plane(f.height(), f.width(), "blend weight")?;
    let p = f.dims().plane();
    let mut out = Tensor::zeros(f.channels(), f.height(), f.width());
    let wv = w.data();
    for c in 0..f.channels() {
        let (fc, bc) = (f.channel(c), b.channel(c));
        for (i, o) in out.channel_mut(c).iter_mut().enumerate().take(p) {
            // Equal inputs short-circuit so blending a feature with itself is exact.
            *o = if fc[i] == bc[i] {
                fc[i]
            } else {
                wv[i] * fc[i] + (1.0 - wv[i]) * bc[i]
            };
        }
    }
    Ok(out)
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<'a> Exec<'a> for Eager {
    type Var = Rc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Self::Var {
        Rc::new(t)
    }

    fn value<'s>(&'s self, v: &'s Self::Var) -> &'s Tensor {
        v
    }

    fn conv(&mut self, x: &Self::Var, layer: &'a Conv2d, _slot: Option<usize>) -> Result<Self::Var> {
        Ok(Rc::new(layer.forward(x)?))
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(x.map(|v| v.max(0.0)))
    }

    fn sigmoid(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(x.map(sigmoid))
    }

    fn tanh(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(x.map(f64::tanh))
    }

    fn concat(&mut self, xs: &[&Self::Var]) -> Result<Self::Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(Tensor::concat(&parts)?))
    }

    fn blend(&mut self, f: &Self::Var, b: &Self::Var, w: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(blend_values(f, b, w)?))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(a.add(b)?))
    }

    fn warp(&mut self, x: &Self::Var, plan: &'a SamplingPlan) -> Result<Self::Var> {
        Ok(Rc::new(plan.apply(x)?))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<'a> {
    Constant,
    Conv {
        x: usize,
        layer: &'a Conv2d,
        slot: Option<usize>,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Concat(Vec<usize>),
    Blend {
        f: usize,
        b: usize,
        w: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Warp {
        x: usize,
        plan: &'a SamplingPlan,
    },
    /// Σ_p weights(p)·‖x(:,p)‖₂ / denom
    WeightedPixelNorm {
        x: usize,
        weights: Tensor,
        denom: f64,
    },
    /// mean((x − target)²)
    MeanSquaredError {
        x: usize,
        target: Tensor,
    },
    Sum(Vec<usize>),
    Scale(usize, f64),
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    requires_grad: bool,
}

/// Per-slot parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub slots: Vec<Option<ConvGrad>>,
}

impl Gradients {
    pub fn empty(slots: usize) -> Self {
        Gradients {
            slots: vec![None; slots],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.slots.iter_mut().flatten().for_each(|g| g.scale(k));
    }
}

/// Recording backend with reverse-mode differentiation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    slots: usize,
}

impl<'a> Tape<'a> {
    /// A tape whose trainable layers use slots `0..slots`.
    pub fn new(slots: usize) -> Self {
        Tape {
            nodes: Vec::new(),
            slots,
        }
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), r))
    }

    /// Scalar `Σ_p weights(p)·‖x(:,p)‖₂ / denom`; `weights` is a constant.
    pub fn weighted_pixel_norm(&mut self, x: &Var, weights: Tensor, denom: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if weights.channels() != 1 {
            return Err(TcvcError::shape("pixel norm weights", "1 channel", weights.channels()));
        }
        weights.ensure_plane(xv.height(), xv.width(), "pixel norm weights")?;
        let norms = pixel_norms(xv);
        let total: f64 = norms.iter().zip(weights.data()).map(|(n, w)| n * w).sum::<f64>() / denom;
        let r = self.req(x.0);
        Ok(self.push(
            Tensor::filled(1, 1, 1, total),
            Op::WeightedPixelNorm {
                x: x.0,
                weights,
                denom,
            },
            r,
        ))
    }

    /// Scalar mean squared error against a constant target.
    pub fn mse(&mut self, x: &Var, target: Tensor) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        target.ensure_dims(xv.dims(), "mse target")?;
        let n = xv.data().len() as f64;
        let total: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let r = self.req(x.0);
        Ok(self.push(
            Tensor::filled(1, 1, 1, total),
            Op::MeanSquaredError { x: x.0, target },
            r,
        ))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let total: f64 = xs.iter().map(|v| self.nodes[v.0].value.data()[0]).sum();
        let r = xs.iter().any(|v| self.req(v.0));
        self.push(
            Tensor::filled(1, 1, 1, total),
            Op::Sum(xs.iter().map(|v| v.0).collect()),
            r,
        )
    }

    pub fn scale(&mut self, x: &Var, k: f64) -> Var {
        let v = self.nodes[x.0].value.scale(k);
        let r = self.req(x.0);
        self.push(v, Op::Scale(x.0, k), r)
    }

    pub fn scalar(&self, v: &Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Reverse-mode pass from a scalar root.
    pub fn backward(&self, root: &Var) -> Result<Gradients> {
        let mut grads = Gradients::empty(self.slots);
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::filled(1, 1, 1, 1.0));

        fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) -> Result<()> {
            match &mut adj[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Conv { x, layer, slot } => {
                    let need_x = self.req(*x);
                    let mut pg = slot.map(|_| ConvGrad::zeros_like(layer));
                    let dx = layer.backward(&self.nodes[*x].value, &g, pg.as_mut(), need_x)?;
                    if let (Some(s), Some(pg)) = (slot, pg) {
                        match &mut grads.slots[*s] {
                            Some(acc) => acc.add_assign(&pg),
                            none => *none = Some(pg),
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *x, dx)?;
                    }
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(&node.value, |g, y| if y > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Tanh(x) => {
                    let dx = g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.channels();
                        if self.req(p) {
                            accumulate(&mut adj, p, g.slice_channels(start, c))?;
                        }
                        start += c;
                    }
                }
                Op::Blend { f, b, w } => {
                    let (fv, bv, wv) = (&self.nodes[*f].value, &self.nodes[*b].value, &self.nodes[*w].value);
                    let ones = Tensor::filled(1, wv.height(), wv.width(), 1.0);
                    if self.req(*f) {
                        let zero = Tensor::zeros(g.channels(), g.height(), g.width());
                        accumulate(&mut adj, *f, blend_values(&g, &zero, wv)?)?;
                    }
                    if self.req(*b) {
                        let inv = ones.sub(wv)?;
                        let zero = Tensor::zeros(g.channels(), g.height(), g.width());
                        accumulate(&mut adj, *b, blend_values(&g, &zero, &inv)?)?;
                    }
                    if self.req(*w) {
                        let mut dw = Tensor::zeros(1, wv.height(), wv.width());
                        for c in 0..g.channels() {
                            let (gc, fc, bc) = (g.channel(c), fv.channel(c), bv.channel(c));
                            for (k, d) in dw.data_mut().iter_mut().enumerate() {
                                *d += gc[k] * (fc[k] - bc[k]);
                            }
                        }
                        accumulate(&mut adj, *w, dw)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.req(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.req(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.req(*b) {
                        accumulate(&mut adj, *b, g.scale(-1.0))?;
                    }
                    if self.req(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Warp { x, plan } => {
                    accumulate(&mut adj, *x, plan.apply_adjoint(&g)?)?;
                }
                Op::WeightedPixelNorm { x, weights, denom } => {
                    let xv = &self.nodes[*x].value;
                    let norms = pixel_norms(xv);
                    let scale = g.data()[0] / denom;
                    let mut dx = Tensor::zeros(xv.channels(), xv.height(), xv.width());
                    for c in 0..xv.channels() {
                        let xc = xv.channel(c);
                        for (k, d) in dx.channel_mut(c).iter_mut().enumerate() {
                            if norms[k] > 0.0 {
                                *d = scale * weights.data()[k] * xc[k] / norms[k];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::MeanSquaredError { x, target } => {
                    let xv = &self.nodes[*x].value;
                    let k = 2.0 * g.data()[0] / xv.data().len() as f64;
                    let dx = xv.zip_map(target, |a, t| k * (a - t))?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if self.req(p) {
                            accumulate(&mut adj, p, g.clone())?;
                        }
                    }
                }
                Op::Scale(x, k) => {
                    accumulate(&mut adj, *x, g.scale(*k))?;
                }
            }
        }
        Ok(grads)
    }
}

fn pixel_norms(x: &Tensor) -> Vec<f64> {
    let p = x.dims().plane();
    let mut sq = vec![0.0; p];
    for c in 0..x.channels() {
        for (s, v) in sq.iter_mut().zip(x.channel(c)) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

impl<'a> Exec<'a> for Tape<'a> {
    type Var = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    fn value<'s>(&'s self, v: &'s Var) -> &'s Tensor {
        &self.nodes[v.0].value
    }

    fn conv(&mut self, x: &Var, layer: &'a Conv2d, slot: Option<usize>) -> Result<Var> {
        if let Some(s) = slot {
            if s >= self.slots {
                return Err(TcvcError::InvalidArgument(format!(
                    "slot {s} out of range for tape with {} slots",
                    self.slots
                )));
            }
        }
        let v = layer.forward(&self.nodes[x.0].value)?;
        let r = slot.is_some() || self.req(x.0);
        Ok(self.push(v, Op::Conv { x: x.0, layer, slot }, r))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let v = self.nodes[x.0].value.map(|v| v.max(0.0));
        let r = self.req(x.0);
        self.push(v, Op::Relu(x.0), r)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let v = self.nodes[x.0].value.map(sigmoid);
        let r = self.req(x.0);
        self.push(v, Op::Sigmoid(x.0), r)
    }

    fn tanh(&mut self, x: &Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::tanh);
        let r = self.req(x.0);
        self.push(v, Op::Tanh(x.0), r)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| &self.nodes[v.0].value).collect();
        let v = Tensor::concat(&parts)?;
        let r = xs.iter().any(|v| self.req(v.0));
        Ok(self.push(v, Op::Concat(xs.iter().map(|v| v.0).collect()), r))
    }

    fn blend(&mut self, f: &Var, b: &Var, w: &Var) -> Result<Var> {
        let v = blend_values(
            &self.nodes[f.0].value,
            &self.nodes[b.0].value,
            &self.nodes[w.0].value,
        )?;
        let r = self.req(f.0) || self.req(b.0) || self.req(w.0);
        Ok(self.push(
            v,
            Op::Blend {
                f: f.0,
                b: b.0,
                w: w.0,
            },
            r,
        ))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let r = self.req(a.0) || self.req(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), r))
    }

    fn warp(&mut self, x: &Var, plan: &'a SamplingPlan) -> Result<Var> {
        let v = plan.apply(&self.nodes[x.0].value)?;
        let r = self.req(x.0);
        Ok(self.push(v, Op::Warp { x: x.0, plan }, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// A small network touching every op; returns the scalar objective.
    fn objective<'a, E: Exec<'a>>(
        e: &mut E,
        l1: &'a Conv2d,
        l2: &'a Conv2d,
        plan: &'a SamplingPlan,
        x: &Tensor,
        y: &Tensor,
    ) -> (E::Var, E::Var) {
        let xv = e.constant(x.clone());
        let yv = e.constant(y.clone());
        let h = e.conv(&xv, l1, Some(0)).unwrap();
        let h = e.relu(&h);
        let cat = e.concat(&[&h, &yv]).unwrap();
        let z = e.conv(&cat, l2, Some(1)).unwrap();
        let w = e.sigmoid(&z);
        let t = e.tanh(&h);
        let hw = e.warp(&h, plan).unwrap();
        let bl = e.blend(&t, &hw, &w).unwrap();
        let out = e.add(&bl, &t).unwrap();
        (out, yv)
    }

    #[test]
    fn tape_and_eager_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l1 = Conv2d::random(2, 3, 3, 1.0, &mut rng);
        let l2 = Conv2d::random(5, 1, 3, 1.0, &mut rng);
        let plan = SamplingPlan::new(&FlowField::new(rand_t(&mut rng, 2, 5, 6)).unwrap());
        let x = rand_t(&mut rng, 2, 5, 6);
        let y = rand_t(&mut rng, 2, 5, 6);
        let mut eager = Eager;
        let (a, _) = objective(&mut eager, &l1, &l2, &plan, &x, &y);
        let mut tape = Tape::new(2);
        let (b, _) = objective(&mut tape, &l1, &l2, &plan, &x, &y);
        assert_eq!(*a, *tape.value(&b));
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l1 = Conv2d::random(2, 3, 3, 1.0, &mut rng);
        let l2 = Conv2d::random(5, 1, 3, 1.0, &mut rng);
        let plan = SamplingPlan::new(&FlowField::new(rand_t(&mut rng, 2, 5, 6).scale(1.5)).unwrap());
        let x = rand_t(&mut rng, 2, 5, 6);
        let y = rand_t(&mut rng, 2, 5, 6);
        let weights = Tensor::from_fn(1, 5, 6, |_, _, _| rng.gen_range(0.0..1.0));
        let target = rand_t(&mut rng, 3, 5, 6);

        let loss = |l1: &Conv2d, l2: &Conv2d| -> (f64, Gradients) {
            let mut tape = Tape::new(2);
            let (out, yv) = objective(&mut tape, l1, l2, &plan, &x, &y);
            let sl = tape.slice_for_test(&out, &yv);
            let n = tape.weighted_pixel_norm(&sl, weights.clone(), 7.0).unwrap();
            let m = tape.mse(&out, target.clone()).unwrap();
            let s = tape.sum(&[n, m]);
            let s = tape.scale(&s, 0.5);
            let g = tape.backward(&s).unwrap();
            (tape.scalar(&s), g)
        };
        let (_, g) = loss(&l1, &l2);
        let eps = 1e-6;
        for (slot, idx) in [(0, 0), (0, 17), (0, 53), (1, 3), (1, 44)] {
            let bump = |d: f64| {
                let (mut a, mut b) = (l1.clone(), l2.clone());
                let layer = if slot == 0 { &mut a } else { &mut b };
                layer.weight_mut()[idx] += d;
                loss(&a, &b).0
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let an = g.slots[slot].as_ref().unwrap().weight[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "slot {slot} idx {idx}: {fd} vs {an}");
        }
        let bias_fd = {
            let (mut b1, mut b2) = (l1.clone(), l1.clone());
            b1.bias_mut()[2] += eps;
            b2.bias_mut()[2] -= eps;
            (loss(&b1, &l2).0 - loss(&b2, &l2).0) / (2.0 * eps)
        };
        assert!((bias_fd - g.slots[0].as_ref().unwrap().bias[2]).abs() < 1e-6);
    }

    #[test]
    fn frozen_layers_accumulate_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frozen = Conv2d::random(1, 2, 3, 1.0, &mut rng);
        let mut tape = Tape::new(1);
        let x = tape.constant(rand_t(&mut rng, 1, 4, 4));
        let y = tape.conv(&x, &frozen, None).unwrap();
        assert!(!tape.req(y.0));
        let l = tape.mse(&y, Tensor::zeros(2, 4, 4)).unwrap();
        let g = tape.backward(&l).unwrap();
        assert!(g.slots[0].is_none());
    }

    impl<'a> Tape<'a> {
        fn slice_for_test(&mut self, a: &Var, b: &Var) -> Var {
            // 3-channel out minus a 2-channel constant padded with its first channel.
            let bv = self.nodes[b.0].value.clone();
            let padded = Tensor::concat(&[&bv, &bv.slice_channels(0, 1)]).unwrap();
            let p = self.constant(padded);
            self.sub(a, &p).unwrap()
        }
    }
}
