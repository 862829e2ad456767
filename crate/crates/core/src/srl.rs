//! Self-regularized training: the temporal warping loss and the training
//! loop that fits only the fusion module.
//!
//! For every distance `d` and frame `i`, the prediction of frame `i+d` is
//! warped onto frame `i` and the masked difference is penalized:
//!
//! ```text
//! L = Σ_d Σ_i  mean_valid_p( M(p) · ‖ŷ_i(p) − warp(ŷ_{i+d}, f_{i+d→i})(p)‖₂ )
//! M = exp(−α ‖x_i − warp(x_{i+d}, f_{i+d→i})‖²)
//! ```
//!
//! `M` is computed from the grayscale inputs and carries no gradient, so no
//! color ground truth is ever read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureMap};
use crate::colorspace::{ChromaMap, Frame};
use crate::config::KeyValues;
use crate::error::{Result, TcvcError};
use crate::flow::{compose, FlowField, FlowSet, SamplingPlan};
use crate::fusion::{FfmParams, FFM_SLOTS};
use crate::nn::{Adam, Exec, Gradients, Tape, Var};
use crate::par;
use crate::propagation::{forward_chain, IntervalPlans, Variant};
use crate::tensor::{Planar, Tensor};

/// Which objective the training loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Temporal warping loss on grayscale input only.
    TemporalWarping,
    /// Supervised L2 against ground-truth chroma (ablation only).
    GroundTruthL2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub interval_len: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub alpha: f64,
    pub warp_distances: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            interval_len: 10,
            batch: 4,
            patch: 256,
            lr0: 5e-5,
            lr_halving_period: 10_000,
            alpha: 50.0,
            warp_distances: vec![1, 2],
            iterations: 0,
            seed: 0,
            loss: LossKind::TemporalWarping,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TcvcError::Config(m.to_string()));
        if self.interval_len < 3 {
            return bad("interval_len must be at least 3");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.batch == 0 || self.patch == 0 || self.lr_halving_period == 0 {
            return bad("batch, patch and lr_halving_period must be positive");
        }
        if self.warp_distances.is_empty() || self.warp_distances.contains(&0) {
            return bad("warp_distances must be a nonempty list of positive integers");
        }
        if self.warp_distances.iter().any(|&d| d >= self.interval_len) {
            return bad("every warp distance must be smaller than interval_len");
        }
        Ok(())
    }

    /// `lr0 · 2^(−⌊k / period⌋)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let halvings = (iteration / self.lr_halving_period).min(1074) as i32;
        self.lr0 * 0.5f64.powi(halvings)
    }

    /// Reads recognised keys from a flat `key = value` file; others are
    /// rejected so typos surface.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for key in kv.keys() {
            match key {
                "interval_len" => cfg.interval_len = kv.parse(key)?,
                "batch" => cfg.batch = kv.parse(key)?,
                "patch" => cfg.patch = kv.parse(key)?,
                "lr0" => cfg.lr0 = kv.parse(key)?,
                "lr_halving_period" => cfg.lr_halving_period = kv.parse(key)?,
                "alpha" => cfg.alpha = kv.parse(key)?,
                "warp_distances" => cfg.warp_distances = kv.parse_list(key)?,
                "iterations" => cfg.iterations = kv.parse(key)?,
                "seed" => cfg.seed = kv.parse(key)?,
                "loss" => {
                    cfg.loss = match kv.get(key).unwrap_or_default() {
                        "temporal_warping" => LossKind::TemporalWarping,
                        "ground_truth_l2" => LossKind::GroundTruthL2,
                        other => return Err(TcvcError::Config(format!("unknown loss '{other}'"))),
                    }
                }
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys this config understands.
    pub const KEYS: &'static [&'static str] = &[
        "interval_len",
        "batch",
        "patch",
        "lr0",
        "lr_halving_period",
        "alpha",
        "warp_distances",
        "iterations",
        "seed",
        "loss",
    ];
}

/// `exp(−alpha · ‖reference(p) − warped(p)‖²)` over channels; 1×H×W.
pub fn visibility_mask(reference: &Tensor, warped: &Tensor, alpha: f64) -> Result<Tensor> {
    warped.ensure_dims(reference.dims(), "visibility_mask")?;
    let mut sq = Tensor::zeros(1, reference.height(), reference.width());
    for c in 0..reference.channels() {
        for ((s, a), b) in sq
            .data_mut()
            .iter_mut()
            .zip(reference.channel(c))
            .zip(warped.channel(c))
        {
            *s += (a - b) * (a - b);
        }
    }
    Ok(sq.map(|d| (-alpha * d).exp()))
}

/// Fields `f_{i+d→i}` on grid `i` for `i = 0..N-d`, composed from the
/// backward fields.
pub fn distance_flows(backward: &[FlowField], d: usize) -> Result<Vec<FlowField>> {
    let n = backward.len() + 1;
    if d == 0 || d >= n {
        return Err(TcvcError::InsufficientFrames { needed: d, got: n });
    }
    (0..n - d)
        .map(|i| {
            let mut f = backward[i].clone();
            for k in 1..d {
                f = compose(&f, &backward[i + k])?;
            }
            Ok(f)
        })
        .collect()
}

/// One term's constant data: sampling plan, mask·validity weights, and the
/// count of valid pixels.
struct PairTerm {
    i: usize,
    j: usize,
    plan: SamplingPlan,
    weights: Tensor,
    denom: f64,
}

fn pair_terms(frames: &[Frame], backward: &[FlowField], cfg: &TrainConfig) -> Result<Vec<PairTerm>> {
    let mut terms = Vec::new();
    for &d in &cfg.warp_distances {
        for (i, f) in distance_flows(backward, d)?.into_iter().enumerate() {
            let plan = SamplingPlan::new(&f);
            let valid = plan.validity().into_tensor();
            let warped_lum = plan.apply(frames[i + d].tensor())?;
            let mask = visibility_mask(frames[i].tensor(), &warped_lum, cfg.alpha)?;
            let weights = mask.zip_map(&valid, |m, v| m * v)?;
            let denom = valid.sum();
            if denom > 0.0 {
                terms.push(PairTerm {
                    i,
                    j: i + d,
                    plan,
                    weights,
                    denom,
                });
            }
        }
    }
    Ok(terms)
}

fn check_loss_inputs(preds: &[ChromaMap], frames: &[Frame], backward: &[FlowField], cfg: &TrainConfig) -> Result<()> {
    let n = preds.len();
    let max_d = cfg.warp_distances.iter().copied().max().unwrap_or(1);
    if n < 3 || n <= max_d {
        return Err(TcvcError::InsufficientFrames {
            needed: max_d.max(2),
            got: n,
        });
    }
    if frames.len() != n || backward.len() != n - 1 {
        return Err(TcvcError::shape(
            "temporal_warping_loss",
            format!("{n} frames and {} fields", n - 1),
            format!("{} frames and {} fields", frames.len(), backward.len()),
        ));
    }
    Ok(())
}

/// Temporal warping loss of a predicted sequence (no gradient).
pub fn temporal_warping_loss(
    preds: &[ChromaMap],
    frames: &[Frame],
    backward: &[FlowField],
    cfg: &TrainConfig,
) -> Result<f64> {
    check_loss_inputs(preds, frames, backward, cfg)?;
    let mut total = 0.0;
    for t in pair_terms(frames, backward, cfg)? {
        let warped = t.plan.apply(preds[t.j].tensor())?;
        let diff = preds[t.i].tensor().sub(&warped)?;
        let mut acc = 0.0;
        for (k, w) in t.weights.data().iter().enumerate() {
            let n2 = diff.data()[k].powi(2) + diff.data()[k + diff.dims().plane()].powi(2);
            acc += w * n2.sqrt();
        }
        total += acc / t.denom;
    }
    Ok(total)
}

fn tape_loss<'a>(tape: &mut Tape<'a>, preds: &[Var], terms: &'a [PairTerm]) -> Result<Var> {
    let mut parts = Vec::with_capacity(terms.len());
    for t in terms {
        let warped = tape.warp(&preds[t.j], &t.plan)?;
        let diff = tape.sub(&preds[t.i], &warped)?;
        parts.push(tape.weighted_pixel_norm(&diff, t.weights.clone(), t.denom)?);
    }
    Ok(tape.sum(&parts))
}

/// A grayscale training sequence with its flow fields. `chroma` is only
/// read by the ground-truth ablation.
#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub frames: Vec<Frame>,
    pub flows: FlowSet,
    pub chroma: Option<Vec<ChromaMap>>,
}

impl TrainingSequence {
    pub fn new(frames: Vec<Frame>, flows: FlowSet) -> Result<Self> {
        let (h, w) = frames
            .first()
            .map(|f| (f.height(), f.width()))
            .ok_or(TcvcError::EmptyDataset("sequence without frames"))?;
        for f in &frames {
            f.tensor().ensure_plane(h, w, "training sequence")?;
        }
        flows.check(frames.len(), h, w)?;
        Ok(TrainingSequence {
            frames,
            flows,
            chroma: None,
        })
    }

    pub fn with_chroma(mut self, chroma: Vec<ChromaMap>) -> Result<Self> {
        if chroma.len() != self.frames.len() {
            return Err(TcvcError::shape("training chroma", self.frames.len(), chroma.len()));
        }
        self.chroma = Some(chroma);
        Ok(self)
    }

    fn dims(&self) -> (usize, usize) {
        (self.frames[0].height(), self.frames[0].width())
    }
}

/// A cropped interval prepared for one gradient evaluation.
pub struct TrainingSample {
    frames: Vec<Frame>,
    flows: FlowSet,
    chroma: Option<Vec<ChromaMap>>,
}

impl TrainingSample {
    /// Crops frames `start..start+len` of `seq` at `(top, left)`.
    pub fn crop(seq: &TrainingSequence, start: usize, len: usize, top: usize, left: usize, patch: (usize, usize)) -> Result<Self> {
        let (ph, pw) = patch;
        let frames = seq.frames[start..start + len]
            .iter()
            .map(|f| f.crop(top, left, ph, pw))
            .collect::<Result<_>>()?;
        let flows = seq.flows.range(start, start + len - 1).crop(top, left, ph, pw)?;
        let chroma = match &seq.chroma {
            Some(c) => Some(
                c[start..start + len]
                    .iter()
                    .map(|m| m.crop(top, left, ph, pw))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        Ok(TrainingSample { frames, flows, chroma })
    }

    pub fn from_parts(frames: Vec<Frame>, flows: FlowSet) -> Self {
        TrainingSample { frames, flows, chroma: None }
    }
}

/// Loss value and FFM gradients for one sample.
pub fn sample_loss_and_grad(
    sample: &TrainingSample,
    backbone: &dyn Backbone,
    ffm: &FfmParams,
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let n = sample.frames.len();
    let features: Vec<FeatureMap> = sample
        .frames
        .iter()
        .map(|f| backbone.extract(f))
        .collect::<Result<_>>()?;
    let first = backbone.map_colors(&features[0])?;
    let last = backbone.map_colors(&features[n - 1])?;
    let plans = IntervalPlans::new(&sample.flows);
    let backward_feats = {
        let mut out = vec![features[n - 1].clone(); n - 1];
        for i in (1..n - 1).rev() {
            out[i - 1] = FeatureMap::from_tensor_unchecked(plans.backward[i].apply(out[i].tensor())?);
        }
        out
    };
    let terms = match cfg.loss {
        LossKind::TemporalWarping => pair_terms(&sample.frames, &sample.flows.backward, cfg)?,
        LossKind::GroundTruthL2 => Vec::new(),
    };

    let mut tape = Tape::new(FFM_SLOTS);
    let fv: Vec<Var> = features.iter().map(|f| tape.constant(f.tensor().clone())).collect();
    let bv: Vec<Var> = backward_feats.iter().map(|f| tape.constant(f.tensor().clone())).collect();
    let (_, internal) = forward_chain(
        &mut tape,
        &fv,
        &bv,
        &plans,
        backbone.head(),
        ffm,
        Variant::Bidirectional,
        true,
    )?;
    let loss = match cfg.loss {
        LossKind::TemporalWarping => {
            let mut preds = Vec::with_capacity(n);
            preds.push(tape.constant(first.into_tensor()));
            preds.extend(internal);
            preds.push(tape.constant(last.into_tensor()));
            tape_loss(&mut tape, &preds, &terms)?
        }
        LossKind::GroundTruthL2 => {
            let gt = sample
                .chroma
                .as_ref()
                .ok_or(TcvcError::EmptyDataset("ground-truth loss needs chroma"))?;
            let mut parts = Vec::new();
            for (k, v) in internal.iter().enumerate() {
                parts.push(tape.mse(v, gt[k + 1].tensor().clone())?);
            }
            tape.sum(&parts)
        }
    };
    let value = tape.scalar(&loss);
    let grads = tape.backward(&loss)?;
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub ffm: FfmParams,
    pub curve: Vec<CurvePoint>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,loss,lr\n");
    for p in curve {
        let _ = writeln!(s, "{},{:e},{:e}", p.iteration, p.loss, p.lr);
    }
    s
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    std::fs::write(path, curve_csv(curve)).map_err(|e| TcvcError::io(path, e))
}

/// Fits the fusion module with Adam; the backbone is only read.
///
/// Each iteration draws `batch` intervals of `interval_len` frames with a
/// random `patch`×`patch` crop shared by all frames and flows of the
/// interval (clamped to the frame size).
pub fn train_tcvc(
    backbone: &dyn Backbone,
    ffm: &FfmParams,
    data: &[TrainingSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TcvcError::EmptyDataset("train_tcvc needs at least one sequence"));
    }
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&k| data[k].frames.len() >= cfg.interval_len)
        .collect();
    if eligible.is_empty() {
        return Err(TcvcError::EmptyDataset("no sequence is as long as interval_len"));
    }
    if cfg.loss == LossKind::GroundTruthL2 && eligible.iter().any(|&k| data[k].chroma.is_none()) {
        return Err(TcvcError::EmptyDataset("ground-truth loss needs chroma for every sequence"));
    }
    for seq in data {
        let (h, w) = seq.dims();
        seq.flows.check(seq.frames.len(), h, w)?;
    }

    let mut params = ffm.clone();
    let mut opt = Adam::new(&params.layers());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let picks: Vec<(usize, usize, usize, usize, (usize, usize))> = (0..cfg.batch)
            .map(|_| {
                let seq = eligible[rng.gen_range(0..eligible.len())];
                let (h, w) = data[seq].dims();
                let (ph, pw) = (cfg.patch.min(h), cfg.patch.min(w));
                let start = rng.gen_range(0..=data[seq].frames.len() - cfg.interval_len);
                let top = rng.gen_range(0..=h - ph);
                let left = rng.gen_range(0..=w - pw);
                (seq, start, top, left, (ph, pw))
            })
            .collect();
        let p = &params;
        let results = par::map_slice(&picks, |&(seq, start, top, left, patch)| {
            let sample = TrainingSample::crop(&data[seq], start, cfg.interval_len, top, left, patch)?;
            sample_loss_and_grad(&sample, backbone, p, cfg)
        });
        let mut total = Gradients::empty(FFM_SLOTS);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
        let scale = 1.0 / cfg.batch as f64;
        total.scale(scale);
        let lr = cfg.lr_at(it);
        curve.push(CurvePoint {
            iteration: it,
            loss: loss * scale,
            lr,
        });
        opt.step(&mut params.layers_mut(), &total, lr);
        if it % 50 == 0 {
            log::debug!("iteration {it}: loss {:.6} lr {lr:e}", loss * scale);
        }
    }
    Ok(TrainOutcome { ffm: params, curve })
}

/// Training config plus the extra keys the `train` command accepts.
pub fn split_train_keys(kv: &KeyValues) -> (BTreeMap<String, String>, Vec<String>) {
    let mut known = BTreeMap::new();
    let mut unknown = Vec::new();
    for key in kv.keys() {
        if TrainConfig::KEYS.contains(&key) {
            known.insert(key.to_string(), kv.get(key).unwrap_or_default().to_string());
        } else {
            unknown.push(key.to_string());
        }
    }
    (known, unknown)
}
