//! Single-image colorization backbone split into a feature extractor and a
//! color mapping head, plus a small trainable built-in backbone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{ChromaMap, Frame};
use crate::error::{Result, TcvcError};
use crate::nn::{Adam, Conv2d, Eager, Exec, Gradients, Tape};
use crate::par;
use crate::tensor::{Planar, Tensor};

/// Deep features of one frame, C×H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl Planar for FeatureMap {
    fn tensor(&self) -> &Tensor {
        &self.0
    }
    fn from_tensor_unchecked(t: Tensor) -> Self {
        FeatureMap(t)
    }
    fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if !t.is_finite() {
            return Err(TcvcError::InvalidArgument("non-finite feature values".into()));
        }
        Ok(FeatureMap(t))
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }
}

/// The last layer of a backbone: one convolution followed by `tanh`, so
/// predicted chroma is bounded to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHead {
    conv: Conv2d,
}

impl ColorHead {
    pub fn new(conv: Conv2d) -> Result<Self> {
        if conv.out_channels() != 2 {
            return Err(TcvcError::shape("color head output", 2, conv.out_channels()));
        }
        Ok(ColorHead { conv })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    /// Head evaluation on any backend. The head is frozen: it never owns a
    /// gradient slot, but gradients still flow through it to `feat`.
    pub fn apply<'a, E: Exec<'a>>(&'a self, e: &mut E, feat: &E::Var) -> Result<E::Var> {
        let z = e.conv(feat, &self.conv, None)?;
        Ok(e.tanh(&z))
    }
}

/// A colorization model usable inside the propagation framework.
///
/// Implementors expose their penultimate-layer features at the input
/// resolution and their final layer as a [`ColorHead`]. Models that change
/// resolution internally must resample inside `extract`.
pub trait Backbone: Send + Sync {
    fn feature_channels(&self) -> usize;

    fn extract(&self, frame: &Frame) -> Result<FeatureMap>;

    fn head(&self) -> &ColorHead;

    /// The backbone's own single-image prediction.
    fn predict(&self, frame: &Frame) -> Result<ChromaMap>;

    fn map_colors(&self, feat: &FeatureMap) -> Result<ChromaMap> {
        if feat.channels() != self.feature_channels() {
            return Err(TcvcError::shape(
                "map_colors",
                self.feature_channels(),
                feat.channels(),
            ));
        }
        let mut e = Eager;
        let v = e.constant(feat.tensor().clone());
        let y = self.head().apply(&mut e, &v)?;
        ChromaMap::new(std::rc::Rc::unwrap_or_clone(y))
    }
}

/// Anchor processing: features and prediction of one frame.
pub fn process_anchor(x: &Frame, backbone: &dyn Backbone) -> Result<(FeatureMap, ChromaMap)> {
    let feat = backbone.extract(x)?;
    let chroma = backbone.map_colors(&feat)?;
    Ok((feat, chroma))
}

pub const TOY_FEATURE_CHANNELS: usize = 32;
const TOY_EXTRACT_LAYERS: usize = 4;

/// Four 3×3 ReLU convolutions (1→32→32→32→32) and a 3×3 `tanh` head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    extract: Vec<Conv2d>,
    head: ColorHead,
}

pub fn build_toy_backbone(seed: u64) -> ToyBackbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = TOY_FEATURE_CHANNELS;
    let gain = std::f64::consts::SQRT_2;
    let extract = (0..TOY_EXTRACT_LAYERS)
        .map(|i| Conv2d::random(if i == 0 { 1 } else { c }, c, 3, gain, &mut rng))
        .collect();
    let head = ColorHead {
        conv: Conv2d::random(c, 2, 3, 1.0, &mut rng),
    };
    ToyBackbone { extract, head }
}

impl ToyBackbone {
    /// Rebuilds from layers in [`ToyBackbone::layers`] order.
    pub fn from_layers(mut layers: Vec<Conv2d>) -> Result<Self> {
        if layers.len() != TOY_EXTRACT_LAYERS + 1 {
            return Err(TcvcError::Format {
                format: "checkpoint",
                field: "backbone layers",
                detail: format!("expected {} layers, found {}", TOY_EXTRACT_LAYERS + 1, layers.len()),
            });
        }
        let head = ColorHead::new(layers.pop().expect("length checked"))?;
        let mut cin = 1;
        for l in &layers {
            if l.in_channels() != cin || l.kernel() % 2 == 0 {
                return Err(TcvcError::Format {
                    format: "checkpoint",
                    field: "backbone layers",
                    detail: "inconsistent channel chain".into(),
                });
            }
            cin = l.out_channels();
        }
        if head.conv.in_channels() != cin {
            return Err(TcvcError::shape("color head input", cin, head.conv.in_channels()));
        }
        Ok(ToyBackbone {
            extract: layers,
            head,
        })
    }

    /// Extractor layers followed by the head.
    pub fn layers(&self) -> Vec<&Conv2d> {
        self.extract.iter().chain(std::iter::once(&self.head.conv)).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        self.extract
            .iter_mut()
            .chain(std::iter::once(&mut self.head.conv))
            .collect()
    }

    /// Zeroes the head so every prediction is exactly 0.
    pub fn zero_head(&mut self) {
        self.head.conv.zero_();
    }

    fn extract_exec<'a, E: Exec<'a>>(&'a self, e: &mut E, x: &E::Var, trainable: bool) -> Result<E::Var> {
        let mut h = x.clone();
        for (i, layer) in self.extract.iter().enumerate() {
            let z = e.conv(&h, layer, trainable.then_some(i))?;
            h = e.relu(&z);
        }
        Ok(h)
    }

    fn check_frame(frame: &Frame) -> Result<()> {
        if frame.height() == 0 || frame.width() == 0 {
            return Err(TcvcError::InvalidArgument("empty frame".into()));
        }
        Ok(())
    }
}

impl Backbone for ToyBackbone {
    fn feature_channels(&self) -> usize {
        self.head.conv.in_channels()
    }

    fn extract(&self, frame: &Frame) -> Result<FeatureMap> {
        Self::check_frame(frame)?;
        let mut e = Eager;
        let x = e.constant(frame.tensor().clone());
        let f = self.extract_exec(&mut e, &x, false)?;
        Ok(FeatureMap(std::rc::Rc::unwrap_or_clone(f)))
    }

    fn head(&self) -> &ColorHead {
        &self.head
    }

    fn predict(&self, frame: &Frame) -> Result<ChromaMap> {
        Self::check_frame(frame)?;
        // Monolithic forward pass, not routed through extract/map_colors.
        let mut h = frame.tensor().clone();
        for layer in &self.extract {
            h = layer.forward(&h)?.map(|v| v.max(0.0));
        }
        let y = self.head.conv.forward(&h)?.map(f64::tanh);
        ChromaMap::new(y)
    }
}

/// Options for fitting the built-in backbone to (luminance, chroma) pairs.
#[derive(Debug, Clone)]
pub struct BackboneTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BackboneTrainOptions {
    fn default() -> Self {
        BackboneTrainOptions {
            steps: 500,
            batch: 4,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneTraining {
    pub backbone: ToyBackbone,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Fits the built-in backbone by Adam on mean squared chroma error.
pub fn train_toy_backbone(
    backbone: &ToyBackbone,
    dataset: &[(Frame, ChromaMap)],
    opts: &BackboneTrainOptions,
) -> Result<BackboneTraining> {
    if dataset.is_empty() {
        return Err(TcvcError::EmptyDataset("backbone training needs at least one pair"));
    }
    for (x, y) in dataset {
        y.tensor().ensure_plane(x.height(), x.width(), "backbone training pair")?;
    }
    let mut model = backbone.clone();
    let mut opt = Adam::new(&model.layers());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let batch = opts.batch.max(1);
    let slots = TOY_EXTRACT_LAYERS + 1;
    let mut losses = Vec::with_capacity(opts.steps);

    for _ in 0..opts.steps {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let m = &model;
        let results = par::map_slice(&picks, |&i| -> Result<(f64, Gradients)> {
            let (x, y) = &dataset[i];
            let mut tape = Tape::new(slots);
            let xv = tape.constant(x.tensor().clone());
            let f = m.extract_exec(&mut tape, &xv, true)?;
            let z = tape.conv(&f, &m.head.conv, Some(TOY_EXTRACT_LAYERS))?;
            let pred = tape.tanh(&z);
            let loss = tape.mse(&pred, y.tensor().clone())?;
            Ok((tape.scalar(&loss), tape.backward(&loss)?))
        });
        let mut total = Gradients::empty(slots);
        let mut loss_sum = 0.0;
        for r in results {
            let (l, g) = r?;
            loss_sum += l;
            total.add_assign(&g);
        }
        total.scale(1.0 / batch as f64);
        losses.push(loss_sum / batch as f64);
        opt.step(&mut model.layers_mut(), &total, opts.lr);
    }
    Ok(BackboneTraining {
        backbone: model,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(seed: u64, h: usize, w: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(Tensor::from_fn(1, h, w, |_, _, _| rng.gen_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn deterministic_construction() {
        assert_eq!(build_toy_backbone(7), build_toy_backbone(7));
        assert_ne!(build_toy_backbone(7), build_toy_backbone(8));
    }

    #[test]
    fn shapes() {
        let b = build_toy_backbone(1);
        let x = random_frame(0, 32, 32);
        let f = b.extract(&x).unwrap();
        assert_eq!(f.tensor().dims(), crate::tensor::Dims::new(32, 32, 32));
        let y = b.map_colors(&f).unwrap();
        assert_eq!(y.tensor().dims(), crate::tensor::Dims::new(2, 32, 32));
    }

    #[test]
    fn split_matches_monolithic_forward() {
        let b = build_toy_backbone(3);
        for s in 0..4 {
            let x = random_frame(s, 9, 13);
            let (_, y) = process_anchor(&x, &b).unwrap();
            assert_eq!(y, b.predict(&x).unwrap());
        }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut b = build_toy_backbone(2);
        b.zero_head();
        let x = Frame::new(Tensor::zeros(1, 8, 8)).unwrap();
        let (_, y) = process_anchor(&x, &b).unwrap();
        assert!(y.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_bounded() {
        let b = build_toy_backbone(5);
        let x = Frame::new(Tensor::from_fn(1, 8, 8, |_, r, c| (r * 40 + c * 90) as f64)).unwrap();
        let y = b.predict(&x).unwrap();
        assert!(y.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn map_colors_checks_channels() {
        let b = build_toy_backbone(5);
        let f = FeatureMap::new(Tensor::zeros(3, 4, 4)).unwrap();
        assert!(b.map_colors(&f).is_err());
    }

    #[test]
    fn training_contract() {
        let b = build_toy_backbone(11);
        let data: Vec<(Frame, ChromaMap)> = (0..3)
            .map(|s| {
                let x = random_frame(s, 6, 6);
                let a = x.tensor().map(|v| v - 0.5);
                let y = ChromaMap::new(Tensor::concat(&[&a, &a.scale(0.5)]).unwrap()).unwrap();
                (x, y)
            })
            .collect();
        let before = data.clone();
        let zero = train_toy_backbone(&b, &data, &BackboneTrainOptions { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(zero.backbone, b);
        let fit = train_toy_backbone(&b, &data, &BackboneTrainOptions { steps: 60, batch: 3, lr: 3e-3, seed: 1 }).unwrap();
        assert_eq!(data, before);
        let first = fit.losses[0];
        let last = *fit.losses.last().unwrap();
        assert!(last < first, "{first} -> {last}");
        assert!(train_toy_backbone(&b, &[], &BackboneTrainOptions::default()).is_err());
    }
}
