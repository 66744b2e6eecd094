//! Channel-major RGB images and the preprocessing / augmentation transforms.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};

/// `[3, H, W]` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(shape_err!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            ));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Bilinear resize with half-pixel centres, edge-clamped.
pub fn resize_bilinear(img: &Image, target: (usize, usize)) -> Result<Image> {
    if target == (img.height, img.width) && target.0 > 0 {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(3 * target.0 * target.1);
    for c in 0..3 {
        data.extend(resize_plane(img.plane(c), (img.height, img.width), target)?);
    }
    Image::new(target.0, target.1, data)
}

/// Single-plane form of [`resize_bilinear`].
pub fn resize_plane(src: &[f32], size: (usize, usize), target: (usize, usize)) -> Result<Vec<f32>> {
    let (h, w) = size;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(invalid!("resize target must be at least 1x1, got {th}x{tw}"));
    }
    if h == 0 || w == 0 || src.len() != h * w {
        return Err(shape_err!("plane of {} values is not {h}x{w}", src.len()));
    }
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(th, h);
    let xs = axis(tw, w);
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(out)
}

/// Per-channel affine normalization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(invalid!("normalization needs finite means and positive stds: {self:?}"));
        }
        Ok(())
    }

    /// Pixel mean and population std per channel over `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            for (c, (s, q)) in sum.iter_mut().zip(&mut sq).enumerate() {
                for &v in img.plane(c) {
                    *s += v as f64;
                    *q += (v as f64) * (v as f64);
                }
            }
            count += img.height * img.width;
        }
        if count == 0 {
            return Err(invalid!("cannot compute normalization from zero images"));
        }
        let n = count as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0f32; 3];
        for c in 0..3 {
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = (var.sqrt() as f32).max(1e-6);
        }
        Ok(Normalization {
            mean: mean.map(|m| m as f32),
            std,
        })
    }
}

/// `(v - mean_c) / std_c`.
pub fn normalize(img: &Image, n: &Normalization) -> Result<Image> {
    n.validate()?;
    let mut out = img.clone();
    let p = img.height * img.width;
    for c in 0..3 {
        for v in &mut out.data[c * p..(c + 1) * p] {
            *v = (*v - n.mean[c]) / n.std[c];
        }
    }
    Ok(out)
}

pub fn denormalize(img: &Image, n: &Normalization) -> Result<Image> {
    n.validate()?;
    let mut out = img.clone();
    let p = img.height * img.width;
    for c in 0..3 {
        for v in &mut out.data[c * p..(c + 1) * p] {
            *v = *v * n.std[c] + n.mean[c];
        }
    }
    Ok(out)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.at(c, y, img.width - 1 - x));
            }
        }
    }
    out
}

pub fn flip_vertical(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, x, img.at(c, img.height - 1 - y, x));
            }
        }
    }
    out
}

/// Rotation about the image centre, bilinear, taps outside the image read 0.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (h, w) = (img.height, img.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let tap = |c: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.at(c, y as usize, x as usize)
        }
    };
    let mut out = Image::filled(h, w, [0.0; 3]);
    for oy in 0..h {
        for ox in 0..w {
            let (dy, dx) = (oy as f64 - cy, ox as f64 - cx);
            // inverse map: rotate the output offset by -angle
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let top = tap(c, y0, x0) * (1.0 - fx) + tap(c, y0, x0 + 1) * fx;
                let bot = tap(c, y0 + 1, x0) * (1.0 - fx) + tap(c, y0 + 1, x0 + 1) * fx;
                out.set(c, oy, ox, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// One draw of the augmentation chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub degrees: f64,
}

impl AugmentParams {
    pub const NONE: AugmentParams = AugmentParams {
        hflip: false,
        vflip: false,
        degrees: 0.0,
    };

    /// Independent flips with probability 1/2 and a uniform angle in
    /// `[-max_degrees, max_degrees]`.
    pub fn sample<R: Rng>(rng: &mut R, max_degrees: f64) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let degrees = if max_degrees > 0.0 {
            rng.random_range(-max_degrees..=max_degrees)
        } else {
            0.0
        };
        AugmentParams { hflip, vflip, degrees }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = if self.hflip { flip_horizontal(img) } else { img.clone() };
        if self.vflip {
            out = flip_vertical(&out);
        }
        if self.degrees != 0.0 {
            out = rotate(&out, self.degrees);
        }
        out
    }
}

pub fn augment<R: Rng>(img: &Image, rng: &mut R, max_degrees: f64) -> Image {
    AugmentParams::sample(rng, max_degrees).apply(img)
}
