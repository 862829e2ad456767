//! sRGB (D65) ⇄ CIE Lab conversion and the normalized luminance/chroma
//! representation used by the networks.
//!
//! Normalization: `lum = L / 100`, `ab_norm = ab / 110`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, TcvcError};
use crate::tensor::{Planar, Tensor};

/// Divisor mapping Lab chroma onto roughly `[-1, 1]`.
pub const CHROMA_SCALE: f64 = 110.0;
/// Divisor mapping Lab lightness onto `[0, 1]`.
pub const LIGHTNESS_SCALE: f64 = 100.0;

// sRGB primaries, D65.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

// Reference white as the image of linear (1,1,1), so R=G=B lands on a=b=0.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one 8-bit sRGB triple to `(L, a, b)`.
pub fn rgb_to_lab_pixel(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (k, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[k] = (row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / WHITE[k];
    }
    let [fx, fy, fz] = xyz.map(lab_f);
    let l = (116.0 * fy - 16.0).clamp(0.0, 100.0);
    [l, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts `(L, a, b)` to 8-bit sRGB, clamping each channel.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let mut out = [0u8; 3];
    for (k, row) in XYZ_TO_RGB.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        out[k] = (linear_to_srgb(lin) * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// An 8-bit sRGB image stored interleaved, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{})", self.height, self.width)
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TcvcError::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(TcvcError::shape(
                "RgbImage::new",
                height * width * 3,
                data.len(),
            ));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        RgbImage::new(height, width, data).expect("positive dims")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        RgbImage::new(height, width, data).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Channel `ch` (0 = R, 1 = G, 2 = B) as a flat iterator.
    pub fn channel(&self, ch: usize) -> impl Iterator<Item = u8> + '_ {
        self.data.iter().skip(ch).step_by(3).copied()
    }

    /// RGB scaled to `[0,1]` as a 3×H×W tensor.
    pub fn to_unit_tensor(&self) -> Tensor {
        Tensor::from_fn(3, self.height, self.width, |ch, r, c| {
            self.data[(r * self.width + c) * 3 + ch] as f64 / 255.0
        })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| TcvcError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RgbImage::new(h as usize, w as usize, rgb.into_raw())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| TcvcError::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Lightness and chroma planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    /// 3×H×W: channel 0 is L in `[0,100]`, channels 1..3 are a and b.
    planes: Tensor,
}

impl LabImage {
    pub fn from_planes(planes: Tensor) -> Result<Self> {
        if planes.channels() != 3 {
            return Err(TcvcError::shape("LabImage", "3 channels", planes.channels()));
        }
        Ok(LabImage { planes })
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn height(&self) -> usize {
        self.planes.height()
    }

    pub fn width(&self) -> usize {
        self.planes.width()
    }

    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        [
            self.planes.at(0, r, c),
            self.planes.at(1, r, c),
            self.planes.at(2, r, c),
        ]
    }
}

/// Normalized luminance `L/100` as a 1×H×W tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Tensor);

/// Normalized chroma `ab/110` as a 2×H×W tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaMap(Tensor);

impl Frame {
    pub fn new(lum: Tensor) -> Result<Self> {
        if lum.channels() != 1 {
            return Err(TcvcError::shape("Frame", "1 channel", lum.channels()));
        }
        Ok(Frame(lum))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Frame> {
        Ok(Frame(self.0.crop(top, left, h, w)?))
    }

    /// Grayscale 8-bit rendering (L only, zero chroma).
    pub fn to_rgb(&self) -> RgbImage {
        let chroma = ChromaMap(Tensor::zeros(2, self.height(), self.width()));
        join_to_rgb(self, &chroma).expect("matching planes")
    }
}

impl ChromaMap {
    pub fn new(ab: Tensor) -> Result<Self> {
        if ab.channels() != 2 {
            return Err(TcvcError::shape("ChromaMap", "2 channels", ab.channels()));
        }
        Ok(ChromaMap(ab))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<ChromaMap> {
        Ok(ChromaMap(self.0.crop(top, left, h, w)?))
    }
}

macro_rules! planar {
    ($t:ty) => {
        impl Planar for $t {
            fn tensor(&self) -> &Tensor {
                &self.0
            }
            fn from_tensor_unchecked(t: Tensor) -> Self {
                Self(t)
            }
            fn into_tensor(self) -> Tensor {
                self.0
            }
        }
    };
}
planar!(Frame);
planar!(ChromaMap);

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let (h, w) = (img.height(), img.width());
    let mut planes = Tensor::zeros(3, h, w);
    for r in 0..h {
        for c in 0..w {
            let lab = rgb_to_lab_pixel(img.pixel(r, c));
            for (k, v) in lab.into_iter().enumerate() {
                *planes.at_mut(k, r, c) = v;
            }
        }
    }
    LabImage { planes }
}

pub fn lab_to_rgb(lab: &LabImage) -> RgbImage {
    RgbImage::from_fn(lab.height(), lab.width(), |r, c| {
        lab_to_rgb_pixel(lab.pixel(r, c))
    })
}

pub fn normalize(lab: &LabImage) -> (Frame, ChromaMap) {
    let lum = lab.planes.slice_channels(0, 1).map(|v| v / LIGHTNESS_SCALE);
    let ab = lab.planes.slice_channels(1, 2).map(|v| v / CHROMA_SCALE);
    (Frame(lum), ChromaMap(ab))
}

pub fn denormalize(frame: &Frame, chroma: &ChromaMap) -> Result<LabImage> {
    chroma
        .0
        .ensure_plane(frame.height(), frame.width(), "denormalize")?;
    let l = frame.0.map(|v| v * LIGHTNESS_SCALE);
    let ab = chroma.0.map(|v| v * CHROMA_SCALE);
    Ok(LabImage {
        planes: Tensor::concat(&[&l, &ab])?,
    })
}

/// Joins input luminance with predicted chroma and converts to sRGB.
pub fn join_to_rgb(frame: &Frame, chroma: &ChromaMap) -> Result<RgbImage> {
    Ok(lab_to_rgb(&denormalize(frame, chroma)?))
}

/// Luminance of an sRGB image in the normalized frame representation.
pub fn luminance(img: &RgbImage) -> Frame {
    normalize(&rgb_to_lab(img)).0
}

/// Path of frame `index` (1-based) inside a frame directory.
pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.png"))
}

/// Reads `00001.png, 00002.png, …` until the first missing index.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<RgbImage>> {
    if !dir.is_dir() {
        return Err(TcvcError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut frames = Vec::new();
    loop {
        let p = frame_path(dir, frames.len() + 1);
        if !p.exists() {
            break;
        }
        frames.push(RgbImage::read_png(&p)?);
    }
    Ok(frames)
}

pub fn write_frame_dir(dir: &Path, frames: &[RgbImage]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TcvcError::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        f.write_png(&frame_path(dir, i + 1))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_and_black() {
        let w = rgb_to_lab_pixel([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-9);
        assert!(w[1].abs() < 0.01 && w[2].abs() < 0.01);
        let b = rgb_to_lab_pixel([0, 0, 0]);
        assert_eq!(b[0], 0.0);
        assert!(b[1].abs() < 1e-12 && b[2].abs() < 1e-12);
        assert_eq!(lab_to_rgb_pixel([100.0, 0.0, 0.0]), [255, 255, 255]);
    }

    #[test]
    fn mid_gray_reference() {
        // Reference value from the CIE formulas evaluated independently:
        // Y = ((128/255 + 0.055)/1.055)^2.4 = 0.215861; L = 116*Y^(1/3) - 16.
        let y: f64 = ((128.0 / 255.0 + 0.055) / 1.055f64).powf(2.4);
        let l_ref = 116.0 * y.cbrt() - 16.0;
        assert!((l_ref - 53.585).abs() < 1e-3);
        let g = rgb_to_lab_pixel([128, 128, 128]);
        assert!((g[0] - l_ref).abs() < 1e-9);
        assert!((g[0] - 53.59).abs() < 0.01);
        assert!(g[1].abs() < 0.01 && g[2].abs() < 0.01);
        assert_eq!(lab_to_rgb_pixel([53.59, 0.0, 0.0]), [128, 128, 128]);
    }

    #[test]
    fn achromatic_axis() {
        for v in 0..=255u8 {
            let lab = rgb_to_lab_pixel([v, v, v]);
            assert!(lab[1].abs() < 0.01 && lab[2].abs() < 0.01, "gray {v}");
            assert_eq!(lab_to_rgb_pixel(lab), [v, v, v]);
        }
    }

    #[test]
    fn normalization_scales() {
        let planes = Tensor::from_vec(3, 1, 1, vec![50.0, 110.0, -55.0]).unwrap();
        let lab = LabImage::from_planes(planes).unwrap();
        let (f, ch) = normalize(&lab);
        assert_eq!(f.tensor().data(), &[0.5]);
        assert_eq!(ch.tensor().data(), &[1.0, -0.5]);
    }

    #[test]
    fn frame_rejects_wrong_channels() {
        assert!(Frame::new(Tensor::zeros(2, 2, 2)).is_err());
        assert!(ChromaMap::new(Tensor::zeros(1, 2, 2)).is_err());
    }

    #[test]
    fn png_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..3)
            .map(|k| RgbImage::from_fn(4, 5, |r, c| [(r * 10 + k) as u8, c as u8, 200]))
            .collect();
        write_frame_dir(dir.path(), &frames).unwrap();
        assert!(dir.path().join("00001.png").exists());
        assert_eq!(read_frame_dir(dir.path()).unwrap(), frames);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn rgb_lab_round_trip_within_one(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let back = lab_to_rgb_pixel(rgb_to_lab_pixel([r, g, b]));
            for (x, y) in [r, g, b].iter().zip(back) {
                prop_assert!((*x as i32 - y as i32).abs() <= 1);
            }
        }

        #[test]
        fn normalize_round_trip(l in 0.0f64..=100.0, a in -110.0f64..110.0, b in -110.0f64..110.0) {
            let lab = LabImage::from_planes(Tensor::from_vec(3, 1, 1, vec![l, a, b]).unwrap()).unwrap();
            let (f, ch) = normalize(&lab);
            let back = denormalize(&f, &ch).unwrap();
            let p = back.pixel(0, 0);
            // Scaling by 1/100 and 1/110 is not injective on f64; the inverse
            // is exact to one ulp.
            prop_assert!((p[0] - l).abs() <= l.abs() * f64::EPSILON);
            prop_assert!((p[1] - a).abs() <= a.abs() * f64::EPSILON);
            prop_assert!((p[2] - b).abs() <= b.abs() * f64::EPSILON);
        }
    }

    #[test]
    fn round_trip_dense_sample() {
        // 10^5+ triples on a fixed stride through the 24-bit cube.
        let mut checked = 0usize;
        let mut worst = 0i32;
        let mut idx: u32 = 0;
        while idx < 1 << 24 {
            let rgb = [(idx >> 16) as u8, (idx >> 8) as u8, idx as u8];
            let back = lab_to_rgb_pixel(rgb_to_lab_pixel(rgb));
            for k in 0..3 {
                worst = worst.max((rgb[k] as i32 - back[k] as i32).abs());
            }
            checked += 1;
            idx += 151;
        }
        assert!(checked >= 100_000);
        assert!(worst <= 1, "worst channel error {worst}");
    }
}
