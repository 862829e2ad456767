//! Whole-video orchestration: interval planning, colorization, ensembling,
//! flow resolution, and the synthetic world used for testing.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, FeatureMap};
use crate::colorspace::{join_to_rgb, luminance, normalize, rgb_to_lab, ChromaMap, Frame, RgbImage};
use crate::config::{parse_list, KeyValues};
use crate::error::{Result, TcvcError};
use crate::flow::{synth_flow, FlowDirection, FlowSet, MotionSpec, MovingRect};
use crate::fusion::FfmParams;
use crate::metrics::FlowSource;
use crate::par;
use crate::propagation::{colorize_from_features, IntervalPlans, Variant};
use crate::tensor::{Planar, Tensor};

/// 1-based inclusive `(start, end)` pairs; neighbours share their boundary.
pub type IntervalPlan = Vec<(usize, usize)>;

/// Splits frames `1..=t` into intervals of `n` frames sharing anchors. The
/// last interval is truncated at `t`.
pub fn plan_intervals(t: usize, n: usize) -> Result<IntervalPlan> {
    if t < 2 {
        return Err(TcvcError::InsufficientFrames { needed: 1, got: t });
    }
    if n < 2 {
        return Err(TcvcError::InvalidArgument(format!("interval length must be at least 2, got {n}")));
    }
    let mut plan = Vec::new();
    let mut start = 1;
    while start < t {
        let end = (start + n - 1).min(t);
        plan.push((start, end));
        start = end;
    }
    Ok(plan)
}

fn check_video(frames: &[Frame], flows: &FlowSet) -> Result<(usize, usize)> {
    let first = frames
        .first()
        .ok_or(TcvcError::EmptyDataset("video without frames"))?;
    let (h, w) = (first.height(), first.width());
    for f in frames {
        f.tensor().ensure_plane(h, w, "video frame")?;
    }
    flows.check(frames.len(), h, w)?;
    Ok((h, w))
}

/// Chroma for every frame of a video using intervals of length `n`.
///
/// Features are extracted once per frame and every anchor is decoded once,
/// so shared anchors agree across intervals.
pub fn colorize_video(
    frames: &[Frame],
    backbone: &dyn Backbone,
    ffm: &FfmParams,
    flows: &FlowSet,
    n: usize,
) -> Result<Vec<ChromaMap>> {
    colorize_video_variant(frames, backbone, ffm, flows, n, Variant::Bidirectional)
}

pub fn colorize_video_variant(
    frames: &[Frame],
    backbone: &dyn Backbone,
    ffm: &FfmParams,
    flows: &FlowSet,
    n: usize,
    variant: Variant,
) -> Result<Vec<ChromaMap>> {
    check_video(frames, flows)?;
    let plan = plan_intervals(frames.len(), n)?;
    let features: Vec<FeatureMap> = par::map_slice(frames, |f| backbone.extract(f))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut anchor_idx: Vec<usize> = plan.iter().flat_map(|&(s, e)| [s - 1, e - 1]).collect();
    anchor_idx.dedup();
    let anchors: Vec<ChromaMap> = par::map_slice(&anchor_idx, |&k| backbone.map_colors(&features[k]))
        .into_iter()
        .collect::<Result<_>>()?;
    let anchor = |k: usize| &anchors[anchor_idx.binary_search(&k).expect("planned anchor")];

    let per_interval = par::map_slice(&plan, |&(s, e)| {
        let (s0, e0) = (s - 1, e - 1);
        let plans = IntervalPlans::new(&flows.range(s0, e0));
        colorize_from_features(
            &features[s0..=e0],
            (anchor(s0), anchor(e0)),
            &plans,
            backbone.head(),
            ffm,
            variant,
        )
    });
    let mut out = Vec::with_capacity(frames.len());
    for (k, maps) in per_interval.into_iter().enumerate() {
        let maps = maps?;
        let skip = usize::from(k > 0);
        out.extend(maps.into_iter().skip(skip));
    }
    Ok(out)
}

/// Per-pixel mean of the chroma produced with each interval length.
pub fn ensemble_colorize(
    frames: &[Frame],
    backbone: &dyn Backbone,
    ffm: &FfmParams,
    flows: &FlowSet,
    ns: &[usize],
) -> Result<Vec<ChromaMap>> {
    match ns {
        [] => Err(TcvcError::InvalidArgument("ensemble needs at least one interval length".into())),
        [n] => colorize_video(frames, backbone, ffm, flows, *n),
        _ => {
            let runs = ns
                .iter()
                .map(|&n| colorize_video(frames, backbone, ffm, flows, n))
                .collect::<Result<Vec<_>>>()?;
            let k = ns.len() as f64;
            (0..frames.len())
                .map(|i| {
                    let mut acc = runs[0][i].tensor().clone();
                    for run in &runs[1..] {
                        acc.add_assign(run[i].tensor())?;
                    }
                    ChromaMap::new(acc.map(|v| v / k))
                })
                .collect()
        }
    }
}

/// The backbone applied to each frame independently.
pub fn per_frame_baseline(frames: &[Frame], backbone: &dyn Backbone) -> Result<Vec<ChromaMap>> {
    par::map_slice(frames, |f| backbone.predict(f)).into_iter().collect()
}

pub fn assemble_rgb(frames: &[Frame], chroma: &[ChromaMap]) -> Result<Vec<RgbImage>> {
    if frames.len() != chroma.len() {
        return Err(TcvcError::shape("assemble_rgb", frames.len(), chroma.len()));
    }
    frames.iter().zip(chroma).map(|(f, c)| join_to_rgb(f, c)).collect()
}

/// Finds flows for a frame directory: an explicit directory first, then
/// `flow_fw/` and `flow_bw/` beside the frames or in their parent.
pub fn resolve_flow_dir(frames_dir: &Path, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(d) = explicit {
        if FlowSet::dir_exists(d) {
            return Ok(d.to_path_buf());
        }
        return Err(TcvcError::MissingFlow(format!(
            "{} has no flow_fw/ and flow_bw/ subdirectories",
            d.display()
        )));
    }
    let mut candidates = vec![frames_dir.to_path_buf()];
    if let Some(p) = frames_dir.parent() {
        candidates.push(p.to_path_buf());
    }
    candidates
        .into_iter()
        .find(|d| FlowSet::dir_exists(d))
        .ok_or_else(|| {
            TcvcError::MissingFlow(format!(
                "no flow_fw/ and flow_bw/ next to {}; pass --flow-dir",
                frames_dir.display()
            ))
        })
}

pub fn load_flows(frames_dir: &Path, explicit: Option<&Path>, frames: usize) -> Result<(FlowSet, FlowSource)> {
    let dir = resolve_flow_dir(frames_dir, explicit)?;
    Ok((FlowSet::read_dir(&dir, frames)?, FlowSource::Files))
}

/// A colored rectangle in the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthObject {
    /// Position at frame 0 and per-frame step.
    pub rect: MovingRect,
    pub color: [u8; 3],
}

/// Description of a synthetic video.
///
/// The background is a tiled pattern of random colors blended into
/// `background` with strength `texture`, scrolling by `background_motion`
/// per frame. Objects translate over it, later ones on top. The grayscale
/// input gets a per-frame brightness offset drawn from `±flicker` and
/// per-pixel noise from `±grain` (both in normalized lightness units).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: [u8; 3],
    pub background_motion: (i64, i64),
    pub texture: f64,
    pub tile: usize,
    pub objects: Vec<SynthObject>,
    pub grain: f64,
    pub flicker: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TcvcError::InvalidArgument(m));
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be nonempty".into());
        }
        if self.frames < 2 {
            return bad("a synthetic video needs at least 2 frames".into());
        }
        if self.tile == 0 {
            return bad("tile must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.texture) || !(self.grain >= 0.0) || !(self.flicker >= 0.0) {
            return bad("texture must lie in [0,1]; grain and flicker must be nonnegative".into());
        }
        let (h, w) = (self.height as i64, self.width as i64);
        for (k, o) in self.objects.iter().enumerate() {
            if o.rect.height == 0 || o.rect.width == 0 {
                return bad(format!("object {k} is empty"));
            }
            for t in 0..self.frames as i64 {
                let r = self.rect_at(o, t as usize);
                let visible = r.top < h
                    && r.left < w
                    && r.top + r.height as i64 > 0
                    && r.left + r.width as i64 > 0;
                if !visible {
                    return bad(format!("object {k} leaves the canvas at frame {t}"));
                }
            }
        }
        Ok(())
    }

    fn rect_at(&self, o: &SynthObject, t: usize) -> MovingRect {
        let t = t as i64;
        MovingRect {
            top: o.rect.top + t * o.rect.dy,
            left: o.rect.left + t * o.rect.dx,
            ..o.rect
        }
    }

    fn motion_at(&self, t: usize) -> MotionSpec {
        MotionSpec::Layers {
            background: self.background_motion,
            objects: self.objects.iter().map(|o| self.rect_at(o, t)).collect(),
        }
    }

    /// A random world: scrolling textured background and 1 to 3 objects,
    /// noise-free.
    pub fn random_world(seed: u64, height: usize, width: usize, frames: usize) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_d0f3_011d);
        let color = |rng: &mut ChaCha8Rng| [rng.gen(), rng.gen(), rng.gen()];
        let background = color(&mut rng);
        let background_motion = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
        let count = rng.gen_range(1..=3);
        let mut objects = Vec::with_capacity(count);
        while objects.len() < count {
            let oh = rng.gen_range(height / 6..=height / 3).max(1);
            let ow = rng.gen_range(width / 6..=width / 3).max(1);
            let rect = MovingRect {
                top: rng.gen_range(0..(height - oh) as i64 + 1),
                left: rng.gen_range(0..(width - ow) as i64 + 1),
                height: oh,
                width: ow,
                dx: rng.gen_range(-2..=2),
                dy: rng.gen_range(-1..=1),
            };
            let obj = SynthObject { rect, color: color(&mut rng) };
            let probe = SynthSpec {
                objects: vec![obj],
                ..SynthSpec::plain(height, width, frames)
            };
            if probe.validate().is_ok() {
                objects.push(obj);
            }
        }
        SynthSpec {
            height,
            width,
            frames,
            background,
            background_motion,
            texture: rng.gen_range(0.4..0.9),
            tile: rng.gen_range(4..=8),
            objects,
            grain: 0.0,
            flicker: 0.0,
        }
    }

    /// Flat gray background, no objects, no noise.
    pub fn plain(height: usize, width: usize, frames: usize) -> SynthSpec {
        SynthSpec {
            height,
            width,
            frames,
            background: [128, 128, 128],
            background_motion: (0, 0),
            texture: 0.0,
            tile: 8,
            objects: Vec::new(),
            grain: 0.0,
            flicker: 0.0,
        }
    }

    /// Parses the key-value spec format (see the README); `object` may repeat.
    pub fn from_key_values(kv: &KeyValues) -> Result<SynthSpec> {
        let ints = |key: &str, n: usize| -> Result<Vec<i64>> {
            let v: Vec<i64> = kv.parse_list(key)?;
            if v.len() != n {
                return Err(TcvcError::Config(format!("'{key}' needs {n} values")));
            }
            Ok(v)
        };
        let rgb = |v: &[i64], key: &str| -> Result<[u8; 3]> {
            let mut out = [0u8; 3];
            for (o, &x) in out.iter_mut().zip(v) {
                *o = u8::try_from(x).map_err(|_| TcvcError::Config(format!("'{key}' color out of range")))?;
            }
            Ok(out)
        };
        let mut spec = SynthSpec::plain(kv.parse("height")?, kv.parse("width")?, kv.parse("frames")?);
        if kv.get("background").is_some() {
            spec.background = rgb(&ints("background", 3)?, "background")?;
        }
        if kv.get("background_motion").is_some() {
            let m = ints("background_motion", 2)?;
            spec.background_motion = (m[0], m[1]);
        }
        spec.texture = kv.parse_or("texture", spec.texture)?;
        spec.tile = kv.parse_or("tile", spec.tile)?;
        spec.grain = kv.parse_or("grain", spec.grain)?;
        spec.flicker = kv.parse_or("flicker", spec.flicker)?;
        for raw in kv.get_all("object") {
            let v: Vec<i64> = parse_list(raw).map_err(|_| TcvcError::Config(format!("bad object '{raw}'")))?;
            if v.len() != 9 || v[2] <= 0 || v[3] <= 0 {
                return Err(TcvcError::Config(format!(
                    "object needs top,left,height,width,dx,dy,r,g,b with positive size: '{raw}'"
                )));
            }
            spec.objects.push(SynthObject {
                rect: MovingRect {
                    top: v[0],
                    left: v[1],
                    height: v[2] as usize,
                    width: v[3] as usize,
                    dx: v[4],
                    dy: v[5],
                },
                color: rgb(&v[6..9], "object")?,
            });
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// A rendered synthetic video with its oracle flows.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub color: Vec<RgbImage>,
    pub gray: Vec<Frame>,
    pub flows: FlowSet,
    pub chroma: Vec<ChromaMap>,
}

fn hash3(seed: u64, a: i64, b: i64) -> u64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (b as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    [0, 1, 2].map(|i| (a[i] as f64 * (1.0 - t) + b[i] as f64 * t).round() as u8)
}

fn render(spec: &SynthSpec, seed: u64, t: usize) -> RgbImage {
    let (bx, by) = spec.background_motion;
    let tile = spec.tile as i64;
    let rects: Vec<(MovingRect, [u8; 3])> = spec
        .objects
        .iter()
        .map(|o| (spec.rect_at(o, t), o.color))
        .collect();
    RgbImage::from_fn(spec.height, spec.width, |r, c| {
        let (r, c) = (r as i64, c as i64);
        if let Some((rect, color)) = rects.iter().rev().find(|(rc, _)| rc.contains(r, c)) {
            // A darker band inside the object so its motion is visible in luminance.
            let (lr, lc) = (r - rect.top, c - rect.left);
            let band = (lr + lc).rem_euclid(4) < 2;
            return if band { mix(*color, [0, 0, 0], 0.25) } else { *color };
        }
        let (wy, wx) = (r - by * t as i64, c - bx * t as i64);
        let h = hash3(seed, wy.div_euclid(tile), wx.div_euclid(tile));
        let cell = [h as u8, (h >> 8) as u8, (h >> 16) as u8];
        mix(spec.background, cell, spec.texture)
    })
}

/// Renders `spec`; identical seeds give identical videos.
///
/// `warp(color[k+1], flows.backward[k]) == color[k]` on every pixel whose
/// correspondence is not occluded.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthVideo> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let color: Vec<RgbImage> = par::map_range(spec.frames, |t| render(spec, seed, t));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut gray = Vec::with_capacity(spec.frames);
    let mut chroma = Vec::with_capacity(spec.frames);
    for img in &color {
        let (lum, ab) = normalize(&rgb_to_lab(img));
        let offset = if spec.flicker > 0.0 { rng.gen_range(-spec.flicker..=spec.flicker) } else { 0.0 };
        let mut noisy = lum.into_tensor();
        for v in noisy.data_mut() {
            let g = if spec.grain > 0.0 { rng.gen_range(-spec.grain..=spec.grain) } else { 0.0 };
            *v = (*v + offset + g).clamp(0.0, 1.0);
        }
        gray.push(Frame::new(noisy)?);
        chroma.push(ab);
    }
    let mut flows = FlowSet::zeros(spec.frames, h, w);
    for k in 0..spec.frames - 1 {
        flows.forward[k] = synth_flow(&spec.motion_at(k + 1), h, w, FlowDirection::Forward);
        flows.backward[k] = synth_flow(&spec.motion_at(k), h, w, FlowDirection::Backward);
    }
    Ok(SynthVideo { color, gray, flows, chroma })
}

/// Reads a frame directory as grayscale input.
pub fn read_gray_frames(dir: &Path) -> Result<Vec<Frame>> {
    let imgs = crate::colorspace::read_frame_dir(dir)?;
    if imgs.is_empty() {
        return Err(TcvcError::EmptyDataset("frame directory has no 00001.png"));
    }
    Ok(imgs.iter().map(luminance).collect())
}

/// Writes a synthetic video as `color/`, `gray/`, `flow_fw/` and `flow_bw/`.
pub fn write_synthetic(video: &SynthVideo, out: &Path) -> Result<()> {
    crate::colorspace::write_frame_dir(&out.join("color"), &video.color)?;
    let gray: Vec<RgbImage> = video.gray.iter().map(Frame::to_rgb).collect();
    crate::colorspace::write_frame_dir(&out.join("gray"), &gray)?;
    video.flows.write_dir(out)
}

/// Mean absolute chroma difference between two videos (for quick checks).
pub fn mean_chroma_diff(a: &[ChromaMap], b: &[ChromaMap]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(TcvcError::shape("mean_chroma_diff", a.len(), b.len()));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        let d: Tensor = x.tensor().sub(y.tensor())?;
        acc += d.data().iter().map(|v| v.abs()).sum::<f64>();
        n += d.data().len();
    }
    Ok(acc / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_toy_backbone;
    use crate::flow::{occlusion_mask, SamplingPlan};
    use crate::fusion::FfmConfig;

    #[test]
    fn plan_examples() {
        assert_eq!(plan_intervals(10, 10).unwrap(), [(1, 10)]);
        assert_eq!(plan_intervals(19, 10).unwrap(), [(1, 10), (10, 19)]);
        assert_eq!(plan_intervals(12, 10).unwrap(), [(1, 10), (10, 12)]);
        assert_eq!(plan_intervals(2, 17).unwrap(), [(1, 2)]);
        assert!(plan_intervals(1, 5).is_err());
        assert!(plan_intervals(5, 1).is_err());
    }

    #[test]
    fn plan_covers_all_lengths() {
        for t in 2..=64 {
            for n in 2..=64 {
                let plan = plan_intervals(t, n).unwrap();
                assert_eq!(plan[0].0, 1);
                assert_eq!(plan.last().unwrap().1, t);
                for w in plan.windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                }
                for &(s, e) in &plan {
                    assert!(e > s && e - s < n);
                }
                let mut owners = vec![0usize; t + 1];
                for &(s, e) in &plan {
                    for k in s + 1..e {
                        owners[k] += 1;
                    }
                }
                let anchors: Vec<usize> = plan.iter().flat_map(|&(s, e)| [s, e]).collect();
                for k in 1..=t {
                    if !anchors.contains(&k) {
                        assert_eq!(owners[k], 1, "t={t} n={n} k={k}");
                    }
                }
            }
        }
    }

    fn world(seed: u64, frames: usize) -> SynthVideo {
        generate_synthetic(&SynthSpec::random_world(seed, 16, 16, frames), seed).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(world(4, 6), world(4, 6));
        assert_ne!(world(4, 6).color, world(5, 6).color);
    }

    #[test]
    fn zero_motion_world() {
        let spec = SynthSpec {
            texture: 0.5,
            objects: vec![SynthObject {
                rect: MovingRect { top: 2, left: 2, height: 4, width: 4, dx: 0, dy: 0 },
                color: [200, 30, 30],
            }],
            ..SynthSpec::plain(10, 12, 5)
        };
        let v = generate_synthetic(&spec, 1).unwrap();
        assert!(v.color.windows(2).all(|p| p[0] == p[1]));
        assert!(v.flows.forward.iter().chain(&v.flows.backward).all(|f| f.tensor().data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn moving_object_field() {
        let spec = SynthSpec {
            objects: vec![SynthObject {
                rect: MovingRect { top: 3, left: 2, height: 4, width: 5, dx: 1, dy: 0 },
                color: [10, 200, 60],
            }],
            ..SynthSpec::plain(12, 16, 4)
        };
        let v = generate_synthetic(&spec, 0).unwrap();
        let fw = &v.flows.forward[0];
        // Object sits at columns 3..8 on grid 1.
        assert_eq!(fw.uv(4, 5), (-1.0, 0.0));
        assert_eq!(fw.uv(0, 0), (0.0, 0.0));
        let (warped, _) = crate::flow::warp_planar(&v.chroma[0], fw).unwrap();
        for r in 3..7 {
            for c in 3..8 {
                for ch in 0..2 {
                    assert_eq!(warped.tensor().at(ch, r, c), v.chroma[1].tensor().at(ch, r, c));
                }
            }
        }
    }

    #[test]
    fn exact_warp_identity_on_visible_pixels() {
        for seed in 0..6 {
            let v = world(seed, 5);
            for k in 0..4 {
                let next = v.color[k + 1].to_unit_tensor();
                let cur = v.color[k].to_unit_tensor();
                let plan = SamplingPlan::new(&v.flows.backward[k]);
                let warped = plan.apply(&next).unwrap();
                let valid = plan.validity();
                let occ = occlusion_mask(&v.flows.backward[k], &v.flows.forward[k]).unwrap();
                let mut checked = 0;
                for r in 0..16 {
                    for c in 0..16 {
                        if valid.get(r, c) && occ.get(r, c) {
                            for ch in 0..3 {
                                assert_eq!(warped.at(ch, r, c), cur.at(ch, r, c), "seed {seed} pair {k} ({r},{c})");
                            }
                            checked += 1;
                        }
                    }
                }
                assert!(checked > 16 * 16 / 3);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::plain(8, 8, 10);
        s.objects.push(SynthObject {
            rect: MovingRect { top: 0, left: 0, height: 2, width: 2, dx: 3, dy: 0 },
            color: [1, 2, 3],
        });
        assert!(s.validate().is_err());
        assert!(SynthSpec::plain(8, 8, 1).validate().is_err());
    }

    #[test]
    fn spec_from_text() {
        let kv = KeyValues::parse_str(
            "height = 12\nwidth = 16\nframes = 6\nbackground = 10,20,30\nbackground_motion = 1,0\n\
             texture = 0.5\nobject = 1,1,3,3,1,0,255,0,0\nobject = 5,5,2,2,0,1,0,0,255\n",
        )
        .unwrap();
        let s = SynthSpec::from_key_values(&kv).unwrap();
        assert_eq!(s.objects.len(), 2);
        assert_eq!(s.background, [10, 20, 30]);
        assert_eq!(s.background_motion, (1, 0));
        let bad = KeyValues::parse_str("height = 4\nwidth = 4\nframes = 3\nobject = 1,1,0,1,0,0,1,1,1").unwrap();
        assert!(SynthSpec::from_key_values(&bad).is_err());
    }

    fn setup(frames: usize) -> (SynthVideo, crate::backbone::ToyBackbone, FfmParams) {
        let v = world(7, frames);
        let b = build_toy_backbone(1);
        let ffm = FfmParams::new(FfmConfig::new(32).with_hidden(8), 2);
        (v, b, ffm)
    }

    #[test]
    fn two_frames_are_backbone_outputs() {
        let (v, b, ffm) = setup(2);
        let out = colorize_video(&v.gray, &b, &ffm, &v.flows, 17).unwrap();
        assert_eq!(out, per_frame_baseline(&v.gray, &b).unwrap());
    }

    #[test]
    fn anchors_and_interval_agreement() {
        let (v, b, ffm) = setup(9);
        let out = colorize_video(&v.gray, &b, &ffm, &v.flows, 4).unwrap();
        assert_eq!(out.len(), 9);
        let base = per_frame_baseline(&v.gray, &b).unwrap();
        for (s, e) in plan_intervals(9, 4).unwrap() {
            assert_eq!(out[s - 1], base[s - 1]);
            assert_eq!(out[e - 1], base[e - 1]);
        }
        // Matches running each interval on its own.
        let single = crate::propagation::colorize_interval(
            &crate::propagation::Interval::new(v.gray[3..7].to_vec(), v.flows.range(3, 6)).unwrap(),
            &b,
            &ffm,
        )
        .unwrap();
        assert_eq!(&out[3..7], &single[..]);
    }

    #[test]
    fn ensemble_contracts() {
        let (v, b, ffm) = setup(7);
        let single = colorize_video(&v.gray, &b, &ffm, &v.flows, 4).unwrap();
        assert_eq!(ensemble_colorize(&v.gray, &b, &ffm, &v.flows, &[4]).unwrap(), single);
        let same = ensemble_colorize(&v.gray, &b, &ffm, &v.flows, &[4, 4]).unwrap();
        assert!(mean_chroma_diff(&same, &single).unwrap() < 1e-15);
        let other = colorize_video(&v.gray, &b, &ffm, &v.flows, 3).unwrap();
        let mixed = ensemble_colorize(&v.gray, &b, &ffm, &v.flows, &[4, 3]).unwrap();
        for i in 0..7 {
            let expect = single[i].tensor().add(other[i].tensor()).unwrap().scale(0.5);
            assert!(mixed[i].tensor().max_abs_diff(&expect) < 1e-15);
        }
        assert!(ensemble_colorize(&v.gray, &b, &ffm, &v.flows, &[]).is_err());
    }

    #[test]
    fn flow_dir_resolution() {
        let tmp = tempfile::tempdir().unwrap();
        let v = world(2, 3);
        write_synthetic(&v, tmp.path()).unwrap();
        let gray = tmp.path().join("gray");
        assert_eq!(resolve_flow_dir(&gray, None).unwrap(), tmp.path());
        let (flows, src) = load_flows(&gray, None, 3).unwrap();
        assert_eq!(src, FlowSource::Files);
        assert_eq!(flows.len(), 2);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(resolve_flow_dir(empty.path(), None), Err(TcvcError::MissingFlow(_))));
        assert!(resolve_flow_dir(&gray, Some(empty.path())).is_err());
        let frames = read_gray_frames(&gray).unwrap();
        assert_eq!(frames.len(), 3);
    }
}
