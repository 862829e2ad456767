//! Feature fusion module: a weighting network that predicts a per-pixel
//! blend between forward- and backward-propagated features, and a refine
//! network that adds a residual correction.
//!
//! Both networks are three 3×3 convolutions with ReLU between them. The
//! weighting network ends in a logistic squash so the weight map lies in
//! `[0, 1]`. The refine network additionally sees the next frame's backward
//! feature and the previous frame's forward feature, each reduced by a 1×1
//! projection. Its last layer starts at zero, so an untrained module is a
//! pure blend.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeatureMap;
use crate::error::{Result, TcvcError};
use crate::nn::{Conv2d, Eager, Exec};
use crate::tensor::{Planar, Tensor};

/// Per-pixel fusion weight, 1×H×W with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(Tensor);

impl Planar for WeightMap {
    fn tensor(&self) -> &Tensor {
        &self.0
    }
    fn from_tensor_unchecked(t: Tensor) -> Self {
        WeightMap(t)
    }
    fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl WeightMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(TcvcError::shape("WeightMap", "1 channel", t.channels()));
        }
        if !t.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(TcvcError::InvalidArgument("weight map values outside [0,1]".into()));
        }
        Ok(WeightMap(t))
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Result<Self> {
        WeightMap::new(Tensor::filled(1, h, w, value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfmConfig {
    /// Feature channels C of the backbone.
    pub feature_channels: usize,
    /// Hidden width of both three-layer networks.
    pub hidden: usize,
    /// Output width of the two 1×1 projections.
    pub projection: usize,
}

impl FfmConfig {
    pub fn new(feature_channels: usize) -> Self {
        FfmConfig {
            feature_channels,
            hidden: 64,
            projection: feature_channels.div_ceil(2),
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }
}

// Slot layout of the trainable layers.
const WN: [usize; 3] = [0, 1, 2];
const PROJ_NEXT: usize = 3;
const PROJ_PREV: usize = 4;
const RN: [usize; 3] = [5, 6, 7];
pub const FFM_SLOTS: usize = 8;

/// All trainable parameters of the fusion module.
#[derive(Debug, Clone, PartialEq)]
pub struct FfmParams {
    config: FfmConfig,
    layers: Vec<Conv2d>,
}

impl FfmParams {
    /// Seeded initialization; the refine network's last layer is zero.
    pub fn new(config: FfmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, p) = (config.feature_channels, config.hidden, config.projection);
        let relu = std::f64::consts::SQRT_2;
        let layers = vec![
            Conv2d::random(5 * c, h, 3, relu, &mut rng),
            Conv2d::random(h, h, 3, relu, &mut rng),
            Conv2d::random(h, 1, 3, 1.0, &mut rng),
            Conv2d::random(c, p, 1, 1.0, &mut rng),
            Conv2d::random(c, p, 1, 1.0, &mut rng),
            Conv2d::random(4 * c + 2 * p, h, 3, relu, &mut rng),
            Conv2d::random(h, h, 3, relu, &mut rng),
            Conv2d::zeros(h, c, 3),
        ];
        FfmParams { config, layers }
    }

    pub fn from_layers(config: FfmConfig, layers: Vec<Conv2d>) -> Result<Self> {
        let reference = FfmParams::new(config, 0);
        if layers.len() != FFM_SLOTS {
            return Err(TcvcError::Format {
                format: "checkpoint",
                field: "ffm layers",
                detail: format!("expected {FFM_SLOTS} layers, found {}", layers.len()),
            });
        }
        for (a, b) in layers.iter().zip(&reference.layers) {
            if (a.in_channels(), a.out_channels(), a.kernel())
                != (b.in_channels(), b.out_channels(), b.kernel())
            {
                return Err(TcvcError::Format {
                    format: "checkpoint",
                    field: "ffm layers",
                    detail: "layer shape does not match configuration".into(),
                });
            }
        }
        Ok(FfmParams { config, layers })
    }

    pub fn config(&self) -> FfmConfig {
        self.config
    }

    pub fn layers(&self) -> Vec<&Conv2d> {
        self.layers.iter().collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        self.layers.iter_mut().collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Conv2d::num_params).sum()
    }

    /// Sets the weighting network's output to the constant `w` (in `(0,1)`),
    /// or exactly 0.5 when `w` is 0.5.
    pub fn set_constant_weight(&mut self, w: f64) {
        let last = &mut self.layers[WN[2]];
        last.zero_();
        let logit = if w == 0.5 { 0.0 } else { (w / (1.0 - w)).ln() };
        last.bias_mut()[0] = logit;
    }

    pub fn zero_weighting_head(&mut self) {
        self.layers[WN[2]].zero_();
    }

    pub fn zero_refine_head(&mut self) {
        self.layers[RN[2]].zero_();
    }

    fn slot(trainable: bool, s: usize) -> Option<usize> {
        trainable.then_some(s)
    }
}

/// The three context features `G_E(x_{i-1}), G_E(x_i), G_E(x_{i+1})`.
pub struct Context<'v, V> {
    pub prev: &'v V,
    pub cur: &'v V,
    pub next: &'v V,
}

/// Intermediate and final values of one fusion step.
pub struct FuseOutput<V> {
    pub weight: V,
    pub blended: V,
    pub residual: V,
    pub fused: V,
}

pub fn compute_weight_exec<'a, E: Exec<'a>>(
    e: &mut E,
    params: &'a FfmParams,
    ctx: &Context<'_, E::Var>,
    forward: &E::Var,
    backward: &E::Var,
    trainable: bool,
) -> Result<E::Var> {
    let x = e.concat(&[ctx.prev, ctx.cur, ctx.next, forward, backward])?;
    let l = &params.layers;
    let h = e.conv(&x, &l[WN[0]], FfmParams::slot(trainable, WN[0]))?;
    let h = e.relu(&h);
    let h = e.conv(&h, &l[WN[1]], FfmParams::slot(trainable, WN[1]))?;
    let h = e.relu(&h);
    let z = e.conv(&h, &l[WN[2]], FfmParams::slot(trainable, WN[2]))?;
    Ok(e.sigmoid(&z))
}

pub fn refine_exec<'a, E: Exec<'a>>(
    e: &mut E,
    params: &'a FfmParams,
    ctx: &Context<'_, E::Var>,
    blended: &E::Var,
    next_backward: &E::Var,
    prev_forward: &E::Var,
    trainable: bool,
) -> Result<E::Var> {
    let l = &params.layers;
    let pn = e.conv(next_backward, &l[PROJ_NEXT], FfmParams::slot(trainable, PROJ_NEXT))?;
    let pp = e.conv(prev_forward, &l[PROJ_PREV], FfmParams::slot(trainable, PROJ_PREV))?;
    let x = e.concat(&[ctx.prev, ctx.cur, ctx.next, blended, &pn, &pp])?;
    let h = e.conv(&x, &l[RN[0]], FfmParams::slot(trainable, RN[0]))?;
    let h = e.relu(&h);
    let h = e.conv(&h, &l[RN[1]], FfmParams::slot(trainable, RN[1]))?;
    let h = e.relu(&h);
    e.conv(&h, &l[RN[2]], FfmParams::slot(trainable, RN[2]))
}

/// `F̃ = W ⊙ F_f + (1 − W) ⊙ F_b + F_res`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_exec<'a, E: Exec<'a>>(
    e: &mut E,
    params: &'a FfmParams,
    ctx: &Context<'_, E::Var>,
    forward: &E::Var,
    backward: &E::Var,
    next_backward: &E::Var,
    prev_forward: &E::Var,
    trainable: bool,
) -> Result<FuseOutput<E::Var>> {
    let weight = compute_weight_exec(e, params, ctx, forward, backward, trainable)?;
    let blended = e.blend(forward, backward, &weight)?;
    let residual = refine_exec(e, params, ctx, &blended, next_backward, prev_forward, trainable)?;
    let fused = e.add(&blended, &residual)?;
    Ok(FuseOutput {
        weight,
        blended,
        residual,
        fused,
    })
}

/// Borrowed feature inputs for one internal frame.
#[derive(Clone, Copy)]
pub struct FusionInputs<'v> {
    pub ctx: [&'v FeatureMap; 3],
    pub forward: &'v FeatureMap,
    pub backward: &'v FeatureMap,
    pub next_backward: &'v FeatureMap,
    pub prev_forward: &'v FeatureMap,
}

impl FusionInputs<'_> {
    fn check(&self, params: &FfmParams) -> Result<()> {
        let reference = self.forward.tensor().dims();
        if reference.c != params.config.feature_channels {
            return Err(TcvcError::shape(
                "fusion input channels",
                params.config.feature_channels,
                reference.c,
            ));
        }
        for f in self
            .ctx
            .iter()
            .copied()
            .chain([self.backward, self.next_backward, self.prev_forward])
        {
            f.tensor().ensure_dims(reference, "fusion inputs")?;
        }
        Ok(())
    }
}

fn with_eager<T>(
    inputs: &FusionInputs<'_>,
    params: &FfmParams,
    f: impl FnOnce(&mut Eager, &Context<'_, std::rc::Rc<Tensor>>, [std::rc::Rc<Tensor>; 4]) -> Result<T>,
) -> Result<T> {
    inputs.check(params)?;
    let mut e = Eager;
    let c = inputs.ctx.map(|m| e.constant(m.tensor().clone()));
    let ctx = Context {
        prev: &c[0],
        cur: &c[1],
        next: &c[2],
    };
    let rest = [
        inputs.forward,
        inputs.backward,
        inputs.next_backward,
        inputs.prev_forward,
    ]
    .map(|m| e.constant(m.tensor().clone()));
    f(&mut e, &ctx, rest)
}

pub fn compute_weight(inputs: &FusionInputs<'_>, params: &FfmParams) -> Result<WeightMap> {
    with_eager(inputs, params, |e, ctx, [f, b, _, _]| {
        let w = compute_weight_exec(e, params, ctx, &f, &b, false)?;
        Ok(WeightMap(std::rc::Rc::unwrap_or_clone(w)))
    })
}

pub fn blend(forward: &FeatureMap, backward: &FeatureMap, w: &WeightMap) -> Result<FeatureMap> {
    let mut e = Eager;
    let (f, b, wv) = (
        e.constant(forward.tensor().clone()),
        e.constant(backward.tensor().clone()),
        e.constant(w.0.clone()),
    );
    let out = e.blend(&f, &b, &wv)?;
    Ok(FeatureMap::from_tensor_unchecked(std::rc::Rc::unwrap_or_clone(out)))
}

/// Residual from the refine network given an already blended feature.
pub fn refine(inputs: &FusionInputs<'_>, blended: &FeatureMap, params: &FfmParams) -> Result<FeatureMap> {
    blended
        .tensor()
        .ensure_dims(inputs.forward.tensor().dims(), "refine blended input")?;
    with_eager(inputs, params, |e, ctx, [_, _, nb, pf]| {
        let fb = e.constant(blended.tensor().clone());
        let r = refine_exec(e, params, ctx, &fb, &nb, &pf, false)?;
        Ok(FeatureMap::from_tensor_unchecked(std::rc::Rc::unwrap_or_clone(r)))
    })
}

/// Eager fusion returning `(fused, blended, residual, weight)`.
pub fn fuse(inputs: &FusionInputs<'_>, params: &FfmParams) -> Result<FusedFeature> {
    with_eager(inputs, params, |e, ctx, [f, b, nb, pf]| {
        let out = fuse_exec(e, params, ctx, &f, &b, &nb, &pf, false)?;
        let take = |v: std::rc::Rc<Tensor>| FeatureMap::from_tensor_unchecked(std::rc::Rc::unwrap_or_clone(v));
        Ok(FusedFeature {
            weight: WeightMap(std::rc::Rc::unwrap_or_clone(out.weight)),
            blended: take(out.blended),
            residual: take(out.residual),
            fused: take(out.fused),
        })
    })
}

#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub weight: WeightMap,
    pub blended: FeatureMap,
    pub residual: FeatureMap,
    pub fused: FeatureMap,
}
