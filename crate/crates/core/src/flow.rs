//! Optical flow fields, bilinear backward warping, forward–backward
//! consistency, synthetic oracle flow and Middlebury `.flo` I/O.
//!
//! A field `f` is defined on the *destination* grid: destination pixel `p`
//! corresponds to location `p + f(p)` in the source image. Warping therefore
//! produces an image aligned with the destination frame in a single sampling
//! pass. Channel 0 holds the horizontal component `u`, channel 1 the vertical
//! component `v`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, TcvcError};
use crate::tensor::{Planar, Tensor};

/// Middlebury tag, stored as a little-endian `f32`.
pub const FLO_MAGIC: f32 = 202_021.25;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Tensor);

impl Planar for FlowField {
    fn tensor(&self) -> &Tensor {
        &self.0
    }
    fn from_tensor_unchecked(t: Tensor) -> Self {
        FlowField(t)
    }
    fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl FlowField {
    pub fn new(uv: Tensor) -> Result<Self> {
        if uv.channels() != 2 {
            return Err(TcvcError::shape("FlowField", "2 channels", uv.channels()));
        }
        if !uv.is_finite() {
            return Err(TcvcError::InvalidArgument("flow contains non-finite values".into()));
        }
        Ok(FlowField(uv))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(2, h, w))
    }

    pub fn constant(h: usize, w: usize, u: f64, v: f64) -> Self {
        FlowField(Tensor::from_fn(2, h, w, |c, _, _| if c == 0 { u } else { v }))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn uv(&self, r: usize, c: usize) -> (f64, f64) {
        (self.0.at(0, r, c), self.0.at(1, r, c))
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<FlowField> {
        Ok(FlowField(self.0.crop(top, left, h, w)?))
    }

    pub fn negate(&self) -> FlowField {
        FlowField(self.0.scale(-1.0))
    }
}

/// Binary per-pixel mask: 1 where the warp sampled fully inside the source.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask(Tensor);

/// Binary per-pixel mask: 1 where forward and backward flow agree.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask(Tensor);

macro_rules! mask_type {
    ($t:ident) => {
        impl $t {
            pub fn ones(h: usize, w: usize) -> Self {
                $t(Tensor::filled(1, h, w, 1.0))
            }

            /// Converts a 0/1 tensor; any nonzero entry counts as 1.
            pub fn from_tensor(t: Tensor) -> Self {
                $t(t.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
            }

            pub fn get(&self, r: usize, c: usize) -> bool {
                self.0.at(0, r, c) != 0.0
            }

            pub fn count(&self) -> usize {
                self.0.data().iter().filter(|&&v| v != 0.0).count()
            }

            pub fn all(&self) -> bool {
                self.0.data().iter().all(|&v| v != 0.0)
            }
        }

        impl Planar for $t {
            fn tensor(&self) -> &Tensor {
                &self.0
            }
            fn from_tensor_unchecked(t: Tensor) -> Self {
                $t(t)
            }
            fn into_tensor(self) -> Tensor {
                self.0
            }
        }
    };
}
mask_type!(ValidityMask);
mask_type!(OcclusionMask);

/// Four bilinear taps per destination pixel, shared across channels.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    h: usize,
    w: usize,
    taps: Vec<[(u32, f64); 4]>,
    valid: Vec<bool>,
}

impl SamplingPlan {
    pub fn new(flow: &FlowField) -> Self {
        let (h, w) = (flow.height(), flow.width());
        let mut taps = Vec::with_capacity(h * w);
        let mut valid = Vec::with_capacity(h * w);
        let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
        for r in 0..h {
            for c in 0..w {
                let (u, v) = flow.uv(r, c);
                let x = c as f64 + u;
                let y = r as f64 + v;
                valid.push((0.0..=max_x).contains(&x) && (0.0..=max_y).contains(&y));
                let x = x.clamp(0.0, max_x);
                let y = y.clamp(0.0, max_y);
                let (x0, fx) = split_coord(x, w);
                let (y0, fy) = split_coord(y, h);
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let idx = |yy: usize, xx: usize| (yy * w + xx) as u32;
                taps.push([
                    (idx(y0, x0), (1.0 - fx) * (1.0 - fy)),
                    (idx(y0, x1), fx * (1.0 - fy)),
                    (idx(y1, x0), (1.0 - fx) * fy),
                    (idx(y1, x1), fx * fy),
                ]);
            }
        }
        SamplingPlan { h, w, taps, valid }
    }

    pub fn validity(&self) -> ValidityMask {
        ValidityMask(
            Tensor::from_vec(
                1,
                self.h,
                self.w,
                self.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )
            .expect("plan dims"),
        )
    }

    pub fn apply(&self, src: &Tensor) -> Result<Tensor> {
        src.ensure_plane(self.h, self.w, "warp")?;
        let mut out = Tensor::zeros(src.channels(), self.h, self.w);
        for ch in 0..src.channels() {
            let s = src.channel(ch);
            let o = out.channel_mut(ch);
            for (dst, taps) in o.iter_mut().zip(&self.taps) {
                *dst = taps[0].1 * s[taps[0].0 as usize]
                    + taps[1].1 * s[taps[1].0 as usize]
                    + taps[2].1 * s[taps[2].0 as usize]
                    + taps[3].1 * s[taps[3].0 as usize];
            }
        }
        Ok(out)
    }

    /// Adjoint of [`SamplingPlan::apply`]: the gradient with respect to the
    /// source given the gradient with respect to the warped output.
    pub fn apply_adjoint(&self, grad_out: &Tensor) -> Result<Tensor> {
        grad_out.ensure_plane(self.h, self.w, "warp adjoint")?;
        let mut grad_src = Tensor::zeros(grad_out.channels(), self.h, self.w);
        for ch in 0..grad_out.channels() {
            let g = grad_out.channel(ch);
            let s = grad_src.channel_mut(ch);
            for (&gv, taps) in g.iter().zip(&self.taps) {
                for &(i, wt) in taps {
                    s[i as usize] += wt * gv;
                }
            }
        }
        Ok(grad_src)
    }
}

// Integer base and fraction with the base kept one below the last index so
// that the right/bottom border is reached with weight 1 on the far tap.
fn split_coord(x: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let base = (x.floor() as usize).min(n - 2);
    (base, x - base as f64)
}

/// Bilinear backward warp of any C×H×W tensor.
pub fn warp(src: &Tensor, flow: &FlowField) -> Result<(Tensor, ValidityMask)> {
    check_plane(src, flow)?;
    let plan = SamplingPlan::new(flow);
    Ok((plan.apply(src)?, plan.validity()))
}

/// Warps a typed planar value (frame, chroma map, feature map).
pub fn warp_planar<P: Planar>(src: &P, flow: &FlowField) -> Result<(P, ValidityMask)> {
    let (t, m) = warp(src.tensor(), flow)?;
    Ok((P::from_tensor_unchecked(t), m))
}

fn check_plane(src: &Tensor, flow: &FlowField) -> Result<()> {
    if src.height() != flow.height() || src.width() != flow.width() {
        return Err(TcvcError::shape(
            "warp",
            format!("{}x{} plane", flow.height(), flow.width()),
            format!("{}x{} plane", src.height(), src.width()),
        ));
    }
    Ok(())
}

/// Chains two fields: `first` maps grid A into B, `second` maps grid B into
/// C; the result maps grid A into C.
pub fn compose(first: &FlowField, second: &FlowField) -> Result<FlowField> {
    let (second_at, _) = warp(second.tensor(), first)?;
    Ok(FlowField(first.0.add(&second_at)?))
}

/// Forward–backward consistency check.
///
/// `f_fwd` lives on grid A and points into B; `f_bwd` lives on grid B and
/// points back into A. A pixel is non-occluded when
/// `|f_fwd + f_bwd(p + f_fwd)|² < 0.01 (|f_fwd|² + |f_bwd(p + f_fwd)|²) + 0.5`.
pub fn occlusion_mask(f_fwd: &FlowField, f_bwd: &FlowField) -> Result<OcclusionMask> {
    if f_fwd.height() != f_bwd.height() || f_fwd.width() != f_bwd.width() {
        return Err(TcvcError::shape(
            "occlusion_mask",
            format!("{}x{}", f_fwd.height(), f_fwd.width()),
            format!("{}x{}", f_bwd.height(), f_bwd.width()),
        ));
    }
    let (back, _) = warp(f_bwd.tensor(), f_fwd)?;
    let (h, w) = (f_fwd.height(), f_fwd.width());
    let mask = Tensor::from_fn(1, h, w, |_, r, c| {
        let (u, v) = f_fwd.uv(r, c);
        let (bu, bv) = (back.at(0, r, c), back.at(1, r, c));
        let sum2 = (u + bu).powi(2) + (v + bv).powi(2);
        let mag2 = u * u + v * v + bu * bu + bv * bv;
        if sum2 < 0.01 * mag2 + 0.5 {
            1.0
        } else {
            0.0
        }
    });
    Ok(OcclusionMask(mask))
}

/// Which grid a synthetic field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// Field for `i → i+1`: on grid `i+1`, sampling frame `i`.
    Forward,
    /// Field for `i+1 → i`: on grid `i`, sampling frame `i+1`.
    Backward,
}

/// An axis-aligned rectangle translating by `(dx, dy)` pixels per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MovingRect {
    pub top: i64,
    pub left: i64,
    pub height: usize,
    pub width: usize,
    pub dx: i64,
    pub dy: i64,
}

impl MovingRect {
    pub fn contains(&self, r: i64, c: i64) -> bool {
        r >= self.top
            && r < self.top + self.height as i64
            && c >= self.left
            && c < self.left + self.width as i64
    }
}

/// Screen-space motion of one time step.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionSpec {
    /// All content moves by `(dx, dy)` pixels per step.
    Translation { dx: i64, dy: i64 },
    /// Background moves by `background`; rects (topmost last) move by their
    /// own steps. Rect positions are given on the grid the field lives on.
    Layers {
        background: (i64, i64),
        objects: Vec<MovingRect>,
    },
}

/// Exact correspondence field of a synthetic motion.
pub fn synth_flow(motion: &MotionSpec, h: usize, w: usize, dir: FlowDirection) -> FlowField {
    let sign = match dir {
        FlowDirection::Forward => -1.0,
        FlowDirection::Backward => 1.0,
    };
    match motion {
        MotionSpec::Translation { dx, dy } => {
            FlowField::constant(h, w, sign * *dx as f64, sign * *dy as f64)
        }
        MotionSpec::Layers {
            background,
            objects,
        } => {
            let mut t = Tensor::zeros(2, h, w);
            for r in 0..h {
                for c in 0..w {
                    let (dx, dy) = objects
                        .iter()
                        .rev()
                        .find(|o| o.contains(r as i64, c as i64))
                        .map(|o| (o.dx, o.dy))
                        .unwrap_or(*background);
                    *t.at_mut(0, r, c) = sign * dx as f64;
                    *t.at_mut(1, r, c) = sign * dy as f64;
                }
            }
            FlowField(t)
        }
    }
}

fn flo_err(field: &'static str, detail: impl Into<String>) -> TcvcError {
    TcvcError::Format {
        format: "flo",
        field,
        detail: detail.into(),
    }
}

/// Decodes a `.flo` byte stream.
pub fn decode_flo(mut r: impl Read) -> Result<FlowField> {
    let magic = r
        .read_f32::<LittleEndian>()
        .map_err(|_| flo_err("magic", "truncated header"))?;
    if magic != FLO_MAGIC {
        return Err(flo_err("magic", format!("expected {FLO_MAGIC}, found {magic}")));
    }
    let width = r
        .read_i32::<LittleEndian>()
        .map_err(|_| flo_err("width", "truncated header"))?;
    if width <= 0 {
        return Err(flo_err("width", format!("must be positive, found {width}")));
    }
    let height = r
        .read_i32::<LittleEndian>()
        .map_err(|_| flo_err("height", "truncated header"))?;
    if height <= 0 {
        return Err(flo_err("height", format!("must be positive, found {height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let mut raw = vec![0f32; 2 * w * h];
    r.read_f32_into::<LittleEndian>(&mut raw)
        .map_err(|_| flo_err("payload", format!("expected {} bytes of flow data", raw.len() * 4)))?;
    let mut t = Tensor::zeros(2, h, w);
    for (i, pair) in raw.chunks_exact(2).enumerate() {
        let (row, col) = (i / w, i % w);
        *t.at_mut(0, row, col) = pair[0] as f64;
        *t.at_mut(1, row, col) = pair[1] as f64;
    }
    FlowField::new(t).map_err(|e| flo_err("payload", e.to_string()))
}

/// Encodes a field as `.flo`. Components are stored as `f32`.
pub fn encode_flo(flow: &FlowField, mut out: impl Write) -> std::io::Result<()> {
    let (h, w) = (flow.height(), flow.width());
    out.write_f32::<LittleEndian>(FLO_MAGIC)?;
    out.write_i32::<LittleEndian>(w as i32)?;
    out.write_i32::<LittleEndian>(h as i32)?;
    for r in 0..h {
        for c in 0..w {
            let (u, v) = flow.uv(r, c);
            out.write_f32::<LittleEndian>(u as f32)?;
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    out.flush()
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let f = File::open(path).map_err(|e| TcvcError::io(path, e))?;
    decode_flo(BufReader::new(f))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let f = File::create(path).map_err(|e| TcvcError::io(path, e))?;
    encode_flo(flow, BufWriter::new(f)).map_err(|e| TcvcError::io(path, e))
}

pub const FORWARD_DIR: &str = "flow_fw";
pub const BACKWARD_DIR: &str = "flow_bw";

pub fn flo_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.flo"))
}

/// Forward (`i → i+1`) and backward (`i+1 → i`) fields of a sequence,
/// index `k` (0-based) connecting frames `k` and `k+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSet {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

impl FlowSet {
    pub fn zeros(frames: usize, h: usize, w: usize) -> Self {
        let n = frames.saturating_sub(1);
        FlowSet {
            forward: vec![FlowField::zeros(h, w); n],
            backward: vec![FlowField::zeros(h, w); n],
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Checks that the set connects `frames` frames of size `h`×`w`.
    pub fn check(&self, frames: usize, h: usize, w: usize) -> Result<()> {
        let need = frames.saturating_sub(1);
        if self.forward.len() != need || self.backward.len() != need {
            return Err(TcvcError::MissingFlow(format!(
                "{frames} frames need {need} forward and backward fields, found {} and {}",
                self.forward.len(),
                self.backward.len()
            )));
        }
        for f in self.forward.iter().chain(&self.backward) {
            if f.height() != h || f.width() != w {
                return Err(TcvcError::shape(
                    "flow set",
                    format!("{h}x{w}"),
                    format!("{}x{}", f.height(), f.width()),
                ));
            }
        }
        Ok(())
    }

    /// Fields restricted to frames `start..=end` (0-based, inclusive).
    pub fn range(&self, start: usize, end: usize) -> FlowSet {
        FlowSet {
            forward: self.forward[start..end].to_vec(),
            backward: self.backward[start..end].to_vec(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<FlowSet> {
        Ok(FlowSet {
            forward: self
                .forward
                .iter()
                .map(|f| f.crop(top, left, h, w))
                .collect::<Result<_>>()?,
            backward: self
                .backward
                .iter()
                .map(|f| f.crop(top, left, h, w))
                .collect::<Result<_>>()?,
        })
    }

    /// Non-occlusion masks for each backward field (on grid `k`).
    pub fn backward_occlusion(&self) -> Result<Vec<OcclusionMask>> {
        self.backward
            .iter()
            .zip(&self.forward)
            .map(|(b, f)| occlusion_mask(b, f))
            .collect()
    }

    pub fn write_dir(&self, root: &Path) -> Result<()> {
        for (name, fields) in [(FORWARD_DIR, &self.forward), (BACKWARD_DIR, &self.backward)] {
            let dir = root.join(name);
            fs::create_dir_all(&dir).map_err(|e| TcvcError::io(&dir, e))?;
            for (k, f) in fields.iter().enumerate() {
                write_flo(&flo_path(&dir, k + 1), f)?;
            }
        }
        Ok(())
    }

    /// Reads `flow_fw/` and `flow_bw/` under `root` for a `frames`-long video.
    pub fn read_dir(root: &Path, frames: usize) -> Result<FlowSet> {
        let mut set = FlowSet {
            forward: Vec::new(),
            backward: Vec::new(),
        };
        for k in 1..frames {
            for (name, out) in [
                (FORWARD_DIR, &mut set.forward),
                (BACKWARD_DIR, &mut set.backward),
            ] {
                let p = flo_path(&root.join(name), k);
                if !p.exists() {
                    return Err(TcvcError::MissingFlow(p.display().to_string()));
                }
                out.push(read_flo(&p)?);
            }
        }
        Ok(set)
    }

    pub fn dir_exists(root: &Path) -> bool {
        root.join(FORWARD_DIR).is_dir() && root.join(BACKWARD_DIR).is_dir()
    }
}
