//! Evaluation metrics: color distribution consistency, warp error, PSNR,
//! Lab L2 error and colorfulness.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_lab_pixel, RgbImage};
use crate::error::{Result, TcvcError};
use crate::flow::{FlowField, OcclusionMask, SamplingPlan};
use crate::par;
use crate::tensor::Planar;

pub const BINS: usize = 256;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const CDC_OFFSETS: [usize; 3] = [1, 2, 4];

/// Normalized 256-bin histogram of one 8-bit channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    p: [f64; BINS],
}

impl ColorHistogram {
    /// Normalizes nonnegative counts. An all-zero input is rejected.
    pub fn from_counts(counts: &[f64; BINS]) -> Result<Self> {
        if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(TcvcError::InvalidArgument("histogram counts must be finite and nonnegative".into()));
        }
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Err(TcvcError::InvalidArgument("histogram has no mass".into()));
        }
        let mut p = [0.0; BINS];
        for (o, c) in p.iter_mut().zip(counts) {
            *o = c / total;
        }
        Ok(ColorHistogram { p })
    }

    pub fn probs(&self) -> &[f64; BINS] {
        &self.p
    }
}

pub fn histogram(img: &RgbImage, channel: usize) -> ColorHistogram {
    let mut counts = [0u64; BINS];
    for v in img.channel(channel) {
        counts[v as usize] += 1;
    }
    let n = (img.height() * img.width()) as f64;
    let mut p = [0.0; BINS];
    for (o, c) in p.iter_mut().zip(counts) {
        *o = c as f64 / n;
    }
    ColorHistogram { p }
}

/// Jensen–Shannon divergence in nats; lies in `[0, ln 2]`.
pub fn js_divergence(p: &ColorHistogram, q: &ColorHistogram) -> f64 {
    let mut acc = 0.0;
    for (&a, &b) in p.p.iter().zip(&q.p) {
        let m = 0.5 * (a + b);
        let ta = if a > 0.0 { a * (a / m).ln() } else { 0.0 };
        let tb = if b > 0.0 { b * (b / m).ln() } else { 0.0 };
        // A two-term sum is commutative in floating point, so JS(P,Q) and
        // JS(Q,P) agree bit for bit.
        acc += ta + tb;
    }
    (0.5 * acc).clamp(0.0, std::f64::consts::LN_2)
}

fn channel_histograms(video: &[RgbImage]) -> Vec<[ColorHistogram; 3]> {
    par::map_slice(video, |img| [0, 1, 2].map(|c| histogram(img, c)))
}

fn cdc_from_hists(h: &[[ColorHistogram; 3]], t: usize) -> Result<f64> {
    let n = h.len();
    if n <= t {
        return Err(TcvcError::InsufficientFrames { needed: t, got: n });
    }
    let mut acc = 0.0;
    for i in 0..n - t {
        for c in 0..3 {
            acc += js_divergence(&h[i][c], &h[i + t][c]);
        }
    }
    Ok(acc / (3 * (n - t)) as f64)
}

/// Mean JS divergence over channels and frame pairs `(i, i+t)`.
pub fn cdc_t(video: &[RgbImage], t: usize) -> Result<f64> {
    if t == 0 {
        return Err(TcvcError::InvalidArgument("cdc offset must be positive".into()));
    }
    cdc_from_hists(&channel_histograms(video), t)
}

/// Mean of `cdc_t` for `t ∈ {1, 2, 4}`; needs more than 4 frames.
pub fn cdc(video: &[RgbImage]) -> Result<f64> {
    Ok(cdc_breakdown(video)?.iter().sum::<f64>() / 3.0)
}

/// `[cdc_1, cdc_2, cdc_4]`.
pub fn cdc_breakdown(video: &[RgbImage]) -> Result<[f64; 3]> {
    if video.len() <= 4 {
        return Err(TcvcError::InsufficientFrames { needed: 4, got: video.len() });
    }
    let h = channel_histograms(video);
    let mut out = [0.0; 3];
    for (o, t) in out.iter_mut().zip(CDC_OFFSETS) {
        *o = cdc_from_hists(&h, t)?;
    }
    Ok(out)
}

/// Occlusion-masked mean squared difference between each frame and its
/// backward-warped successor, in unit RGB, averaged over pairs.
///
/// `masks[k]` lives on grid `k`; pixels the warp clamps are excluded too.
/// Pairs whose mask is empty are skipped; if every pair is skipped the
/// result is an error.
pub fn warp_error(video: &[RgbImage], flows_bw: &[FlowField], masks: &[OcclusionMask]) -> Result<f64> {
    let pairs = video.len().saturating_sub(1);
    if flows_bw.len() < pairs {
        return Err(TcvcError::MissingFlow(format!(
            "{} frames need {pairs} backward fields, found {}",
            video.len(),
            flows_bw.len()
        )));
    }
    if masks.len() < pairs {
        return Err(TcvcError::shape("warp_error masks", pairs, masks.len()));
    }
    let per_pair = par::map_range(pairs, |k| -> Result<Option<f64>> {
        let cur = video[k].to_unit_tensor();
        let next = video[k + 1].to_unit_tensor();
        let plan = SamplingPlan::new(&flows_bw[k]);
        let warped = plan.apply(&next)?;
        let valid = plan.validity().into_tensor();
        let mask = masks[k].tensor();
        mask.ensure_plane(cur.height(), cur.width(), "warp_error mask")?;
        let plane = cur.dims().plane();
        let (mut num, mut den) = (0.0, 0.0);
        for p in 0..plane {
            let m = mask.data()[p] * valid.data()[p];
            if m == 0.0 {
                continue;
            }
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = cur.data()[c * plane + p] - warped.data()[c * plane + p];
                d2 += d * d;
            }
            num += m * d2;
            den += m;
        }
        Ok((den > 0.0).then(|| num / den))
    });
    let mut acc = 0.0;
    let mut used = 0usize;
    for (k, r) in per_pair.into_iter().enumerate() {
        match r? {
            Some(v) => {
                acc += v;
                used += 1;
            }
            None => log::warn!("warp_error: pair {k} has an empty mask, skipped"),
        }
    }
    if used == 0 {
        return Err(TcvcError::InvalidArgument("every pair has an empty mask".into()));
    }
    Ok(acc / used as f64)
}

fn same_dims(a: &RgbImage, b: &RgbImage, ctx: &'static str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(TcvcError::shape(
            ctx,
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    Ok(())
}

/// 8-bit RGB PSNR in dB, [`PSNR_CAP`] for identical images.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    same_dims(pred, gt, "psnr")?;
    let sse: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse / pred.data().len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean per-pixel Euclidean distance in Lab.
pub fn lab_l2(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    same_dims(pred, gt, "lab_l2")?;
    let n = (pred.height() * pred.width()) as f64;
    let total: f64 = pred
        .pixels()
        .zip(gt.pixels())
        .map(|(a, b)| {
            let (la, lb) = (rgb_to_lab_pixel(a), rgb_to_lab_pixel(b));
            ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt()
        })
        .sum();
    Ok(total / n)
}

/// Hasler–Süsstrunk colorfulness on 8-bit RGB.
pub fn colorfulness(img: &RgbImage) -> f64 {
    let n = (img.height() * img.width()) as f64;
    let (mut s_rg, mut s_yb, mut q_rg, mut q_yb) = (0.0, 0.0, 0.0, 0.0);
    for [r, g, b] in img.pixels() {
        let (r, g, b) = (r as f64, g as f64, b as f64);
        let rg = r - g;
        let yb = 0.5 * (r + g) - b;
        s_rg += rg;
        s_yb += yb;
        q_rg += rg * rg;
        q_yb += yb * yb;
    }
    let (m_rg, m_yb) = (s_rg / n, s_yb / n);
    let var_rg = (q_rg / n - m_rg * m_rg).max(0.0);
    let var_yb = (q_yb / n - m_yb * m_yb).max(0.0);
    (var_rg + var_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

/// Where the flows used for warp error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    Files,
    Oracle,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub name: String,
    pub frames: usize,
    pub warp_error: Option<f64>,
    pub cdc: f64,
    pub cdc_1: f64,
    pub cdc_2: f64,
    pub cdc_4: f64,
    pub psnr: Option<f64>,
    pub lab_l2: Option<f64>,
    pub colorfulness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr_color_space: String,
    pub flow_source: FlowSource,
    pub js_log_base: String,
    pub histogram_bins: usize,
    pub videos: Vec<VideoMetrics>,
    pub mean: VideoMetrics,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics of one predicted video. `gt` enables PSNR and Lab L2; `flows`
/// (backward fields with their occlusion masks) enables warp error.
pub fn evaluate_video(
    name: &str,
    pred: &[RgbImage],
    gt: Option<&[RgbImage]>,
    flows: Option<(&[FlowField], &[OcclusionMask])>,
) -> Result<VideoMetrics> {
    let [c1, c2, c4] = cdc_breakdown(pred)?;
    let (psnr_v, l2) = match gt {
        Some(gt) => {
            if gt.len() != pred.len() {
                return Err(TcvcError::shape("ground truth frames", pred.len(), gt.len()));
            }
            let per = par::map_range(pred.len(), |i| Ok::<_, TcvcError>((psnr(&pred[i], &gt[i])?, lab_l2(&pred[i], &gt[i])?)));
            let per = per.into_iter().collect::<Result<Vec<_>>>()?;
            let n = per.len() as f64;
            (
                Some(per.iter().map(|p| p.0).sum::<f64>() / n),
                Some(per.iter().map(|p| p.1).sum::<f64>() / n),
            )
        }
        None => (None, None),
    };
    let we = match flows {
        Some((f, m)) => Some(warp_error(pred, f, m)?),
        None => None,
    };
    let cf = pred.iter().map(colorfulness).sum::<f64>() / pred.len() as f64;
    Ok(VideoMetrics {
        name: name.to_string(),
        frames: pred.len(),
        warp_error: we,
        cdc: (c1 + c2 + c4) / 3.0,
        cdc_1: c1,
        cdc_2: c2,
        cdc_4: c4,
        psnr: psnr_v,
        lab_l2: l2,
        colorfulness: cf,
    })
}

impl MetricsReport {
    pub fn new(videos: Vec<VideoMetrics>, flow_source: FlowSource) -> Result<Self> {
        if videos.is_empty() {
            return Err(TcvcError::EmptyDataset("report without videos"));
        }
        let n = videos.len() as f64;
        let avg = |f: fn(&VideoMetrics) -> f64| videos.iter().map(f).sum::<f64>() / n;
        let mean = VideoMetrics {
            name: "mean".into(),
            frames: videos.iter().map(|v| v.frames).sum(),
            warp_error: mean_opt(videos.iter().map(|v| v.warp_error)),
            cdc: avg(|v| v.cdc),
            cdc_1: avg(|v| v.cdc_1),
            cdc_2: avg(|v| v.cdc_2),
            cdc_4: avg(|v| v.cdc_4),
            psnr: mean_opt(videos.iter().map(|v| v.psnr)),
            lab_l2: mean_opt(videos.iter().map(|v| v.lab_l2)),
            colorfulness: avg(|v| v.colorfulness),
        };
        Ok(MetricsReport {
            psnr_color_space: "rgb8".into(),
            flow_source,
            js_log_base: "e".into(),
            histogram_bins: BINS,
            videos,
            mean,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| TcvcError::io(path, e))
    }

    /// Aligned text table: warp error, CDC, PSNR, L2, colorfulness.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
        let name_w = self
            .videos
            .iter()
            .map(|v| v.name.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>10}  {:>10}  {:>8}  {:>8}  {:>12}",
            "video", "warp_error", "cdc", "psnr", "lab_l2", "colorfulness"
        );
        for v in self.videos.iter().chain(std::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "{:<name_w$}  {:>10}  {:>10.6}  {:>8}  {:>8}  {:>12.3}",
                v.name,
                fmt(v.warp_error, 6),
                v.cdc,
                fmt(v.psnr, 2),
                fmt(v.lab_l2, 3),
                v.colorfulness
            );
        }
        s
    }
}
