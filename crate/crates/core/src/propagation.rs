//! Bidirectional feature propagation over one interval.
//!
//! Anchors (first and last frame) go through the backbone directly. The
//! last anchor's features are warped backwards frame by frame; the first
//! anchor's features are then warped forwards, fused with the backward
//! features at every internal frame, decoded by the backbone head, and the
//! fused feature is what travels on to the next frame.

use crate::backbone::{Backbone, ColorHead, FeatureMap};
use crate::colorspace::{ChromaMap, Frame};
use crate::error::{Result, TcvcError};
use crate::flow::{FlowSet, SamplingPlan};
use crate::fusion::{fuse_exec, Context, FfmParams};
use crate::nn::{Eager, Exec};
use crate::par;
use crate::tensor::{Planar, Tensor};

/// N consecutive frames with the N−1 forward and backward fields between them.
#[derive(Debug, Clone)]
pub struct Interval {
    frames: Vec<Frame>,
    flows: FlowSet,
}

impl Interval {
    pub fn new(frames: Vec<Frame>, flows: FlowSet) -> Result<Self> {
        if frames.len() < 2 {
            return Err(TcvcError::InsufficientFrames {
                needed: 1,
                got: frames.len(),
            });
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        for f in &frames {
            f.tensor().ensure_plane(h, w, "interval frames")?;
        }
        flows.check(frames.len(), h, w)?;
        Ok(Interval { frames, flows })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn flows(&self) -> &FlowSet {
        &self.flows
    }
}

/// Which fusion the forward chain performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Learned weighting and refinement.
    #[default]
    Bidirectional,
    /// Forward chain only: weight fixed to 1, no refinement.
    ForwardOnly,
}

/// Sampling plans for every field of an interval, built once.
#[derive(Debug, Clone)]
pub struct IntervalPlans {
    pub forward: Vec<SamplingPlan>,
    pub backward: Vec<SamplingPlan>,
}

impl IntervalPlans {
    pub fn new(flows: &FlowSet) -> Self {
        IntervalPlans {
            forward: flows.forward.iter().map(SamplingPlan::new).collect(),
            backward: flows.backward.iter().map(SamplingPlan::new).collect(),
        }
    }
}

/// Backward chain `F_i^b = warp(F_{i+1}^b, f_{i+1→i})`.
///
/// Returns `[F_2^b, …, F_{N-1}^b, F_N^b]` (N−1 entries; the last is the input).
pub fn backward_pass(last_features: &FeatureMap, interval: &Interval) -> Result<Vec<FeatureMap>> {
    last_features
        .tensor()
        .ensure_plane(interval.frames[0].height(), interval.frames[0].width(), "backward_pass")?;
    let plans: Vec<SamplingPlan> = interval.flows.backward.iter().map(SamplingPlan::new).collect();
    backward_chain(last_features, &plans)
}

fn backward_chain(last: &FeatureMap, plans: &[SamplingPlan]) -> Result<Vec<FeatureMap>> {
    let n = plans.len() + 1;
    let mut out = vec![last.clone(); n - 1];
    // out[k] holds frame k+1 (0-based frame index).
    for i in (1..n - 1).rev() {
        let next = out[i].tensor();
        out[i - 1] = FeatureMap::from_tensor_unchecked(plans[i].apply(next)?);
    }
    Ok(out)
}

/// Runs the forward chain on any backend.
///
/// `features[k]` is `G_E(x_k)` for every frame of the interval and
/// `backward[k]` is the backward feature of frame `k+1`. Returns the fused
/// features and predicted chroma of internal frames `1..N-1` (0-based).
#[allow(clippy::too_many_arguments)]
pub fn forward_chain<'a, E: Exec<'a>>(
    e: &mut E,
    features: &[E::Var],
    backward: &[E::Var],
    plans: &'a IntervalPlans,
    head: &'a ColorHead,
    ffm: &'a FfmParams,
    variant: Variant,
    trainable: bool,
) -> Result<(Vec<E::Var>, Vec<E::Var>)> {
    let n = features.len();
    let mut fused_out = Vec::with_capacity(n.saturating_sub(2));
    let mut chroma_out = Vec::with_capacity(n.saturating_sub(2));
    if n <= 2 {
        return Ok((fused_out, chroma_out));
    }
    let mut prev = features[0].clone();
    let mut fwd = e.warp(&features[0], &plans.forward[0])?;
    for i in 1..n - 1 {
        let fused = match variant {
            Variant::ForwardOnly => fwd.clone(),
            Variant::Bidirectional => {
                let ctx = Context {
                    prev: &features[i - 1],
                    cur: &features[i],
                    next: &features[i + 1],
                };
                let out = fuse_exec(
                    e,
                    ffm,
                    &ctx,
                    &fwd,
                    &backward[i - 1],
                    &backward[i],
                    &prev,
                    trainable,
                )?;
                out.fused
            }
        };
        chroma_out.push(head.apply(e, &fused)?);
        if i + 1 < n - 1 {
            fwd = e.warp(&fused, &plans.forward[i])?;
        }
        prev = fused.clone();
        fused_out.push(fused);
    }
    Ok((fused_out, chroma_out))
}

/// Eager forward pass returning fused features and chroma of internal frames.
pub fn forward_pass(
    first_features: &FeatureMap,
    backward_feats: &[FeatureMap],
    interval: &Interval,
    ffm: &FfmParams,
    backbone: &dyn Backbone,
) -> Result<(Vec<FeatureMap>, Vec<ChromaMap>)> {
    let n = interval.len();
    if backward_feats.len() != n - 1 {
        return Err(TcvcError::shape("forward_pass backward features", n - 1, backward_feats.len()));
    }
    let mut features = Vec::with_capacity(n);
    features.push(first_features.clone());
    for f in &interval.frames[1..n - 1] {
        features.push(backbone.extract(f)?);
    }
    features.push(backward_feats[n - 2].clone());
    let plans = IntervalPlans::new(&interval.flows);
    run_eager(&features, backward_feats, &plans, backbone.head(), ffm, Variant::Bidirectional)
}

fn run_eager(
    features: &[FeatureMap],
    backward: &[FeatureMap],
    plans: &IntervalPlans,
    head: &ColorHead,
    ffm: &FfmParams,
    variant: Variant,
) -> Result<(Vec<FeatureMap>, Vec<ChromaMap>)> {
    let mut e = Eager;
    let fv: Vec<_> = features.iter().map(|f| e.constant(f.tensor().clone())).collect();
    let bv: Vec<_> = backward.iter().map(|f| e.constant(f.tensor().clone())).collect();
    let (fused, chroma) = forward_chain(&mut e, &fv, &bv, plans, head, ffm, variant, false)?;
    let unwrap = |v: std::rc::Rc<Tensor>| std::rc::Rc::unwrap_or_clone(v);
    Ok((
        fused
            .into_iter()
            .map(|v| FeatureMap::from_tensor_unchecked(unwrap(v)))
            .collect(),
        chroma
            .into_iter()
            .map(|v| ChromaMap::new(unwrap(v)))
            .collect::<Result<_>>()?,
    ))
}

/// Chroma for every frame of an interval from precomputed features.
///
/// `features[k] = G_E(x_k)`; `anchors` are the backbone predictions for the
/// first and last frame and are placed in the output unchanged.
pub fn colorize_from_features(
    features: &[FeatureMap],
    anchors: (&ChromaMap, &ChromaMap),
    plans: &IntervalPlans,
    head: &ColorHead,
    ffm: &FfmParams,
    variant: Variant,
) -> Result<Vec<ChromaMap>> {
    let n = features.len();
    let backward = backward_chain(&features[n - 1], &plans.backward)?;
    let (_, internal) = run_eager(features, &backward, plans, head, ffm, variant)?;
    let mut out = Vec::with_capacity(n);
    out.push(anchors.0.clone());
    out.extend(internal);
    out.push(anchors.1.clone());
    Ok(out)
}

/// All N chroma maps of an interval.
pub fn colorize_interval(interval: &Interval, backbone: &dyn Backbone, ffm: &FfmParams) -> Result<Vec<ChromaMap>> {
    colorize_interval_variant(interval, backbone, ffm, Variant::Bidirectional)
}

pub fn colorize_interval_variant(
    interval: &Interval,
    backbone: &dyn Backbone,
    ffm: &FfmParams,
    variant: Variant,
) -> Result<Vec<ChromaMap>> {
    let n = interval.len();
    let features = par::map_slice(&interval.frames, |f| backbone.extract(f))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let first = backbone.map_colors(&features[0])?;
    let last = backbone.map_colors(&features[n - 1])?;
    let plans = IntervalPlans::new(&interval.flows);
    colorize_from_features(&features, (&first, &last), &plans, backbone.head(), ffm, variant)
}
