//! Synthetic overhead ship imagery: four hull families rendered on a noisy
//! water texture with random placement, heading, scale and brightness.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::Image;
use super::ppm::encode_ppm;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Brown deck with a row of dark hatch covers.
    BulkCarrier,
    /// Grey deck with a bright superstructure amidships.
    Cargo,
    /// Deck covered by a grid of multicoloured boxes.
    Container,
    /// Green deck with a light pipe run along the centreline.
    OilTanker,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::BulkCarrier, Family::Cargo, Family::Container, Family::OilTanker];

    pub fn name(self) -> &'static str {
        match self {
            Family::BulkCarrier => "bulk_carrier",
            Family::Cargo => "cargo",
            Family::Container => "container",
            Family::OilTanker => "oil_tanker",
        }
    }

    fn beam_ratio(self) -> f32 {
        match self {
            Family::BulkCarrier => 0.20,
            Family::Cargo => 0.19,
            Family::Container => 0.17,
            Family::OilTanker => 0.19,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            per_class: 250,
            size: 64,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(invalid!("synthetic images must be at least 32 pixels, got {}", self.size));
        }
        if !(1..=Family::ALL.len()).contains(&self.classes) {
            return Err(invalid!("between 1 and {} classes are available", Family::ALL.len()));
        }
        Ok(())
    }
}

const WHITE: [f32; 3] = [0.90, 0.90, 0.88];
const PALETTE: [[f32; 3]; 6] = [
    [0.80, 0.15, 0.12],
    [0.15, 0.30, 0.75],
    [0.20, 0.65, 0.25],
    [0.90, 0.55, 0.10],
    [0.85, 0.85, 0.80],
    [0.90, 0.80, 0.15],
];

/// Deck colour at normalized hull coordinates `a` (stern -1 to bow 1) and
/// `b` (port -1 to starboard 1), or `None` outside the hull.
fn hull_colour(family: Family, a: f32, b: f32, boxes: &[[f32; 3]]) -> Option<[f32; 3]> {
    if a.abs() > 1.0 {
        return None;
    }
    let half_width = if a > 0.65 {
        (1.0 - ((a - 0.65) / 0.35).powi(2)).max(0.0).sqrt()
    } else if a < -0.92 {
        0.85
    } else {
        1.0
    };
    if b.abs() > half_width {
        return None;
    }
    if b.abs() > half_width - 0.15 {
        return Some([0.32, 0.32, 0.34]);
    }
    let bridge = (-0.92..-0.72).contains(&a) && b.abs() < 0.8;
    Some(match family {
        Family::BulkCarrier => {
            if bridge {
                WHITE
            } else {
                let slot = (a + 0.62) / 0.22;
                if (0.0..6.0).contains(&slot) && slot.fract() < 0.72 && b.abs() < 0.6 {
                    [0.18, 0.18, 0.20]
                } else {
                    [0.50, 0.26, 0.18]
                }
            }
        }
        Family::Cargo => {
            if a.abs() < 0.14 && b.abs() < 0.85 {
                WHITE
            } else if (0.3..0.62).contains(&a.abs()) && b.abs() < 0.45 {
                [0.26, 0.30, 0.36]
            } else {
                [0.55, 0.55, 0.52]
            }
        }
        Family::Container => {
            if bridge {
                WHITE
            } else {
                let (u, v) = ((a + 0.66) / 0.145, (b + 0.8) / 0.4);
                if (0.0..10.0).contains(&u) && (0.0..4.0).contains(&v) && u.fract() < 0.85 && v.fract() < 0.85 {
                    boxes[u as usize * 4 + v as usize]
                } else {
                    [0.22, 0.22, 0.24]
                }
            }
        }
        Family::OilTanker => {
            if bridge {
                WHITE
            } else if b.abs() < 0.12 || (a.abs() < 0.05 && b.abs() < 0.75) || (a > -0.7 && a < 0.8 && (b.abs() - 0.45).abs() < 0.05) {
                [0.78, 0.78, 0.72]
            } else {
                [0.20, 0.42, 0.26]
            }
        }
    })
}

/// Renders one image; fully determined by the RNG state.
pub fn render(family: Family, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f32;
    let brightness: f32 = rng.random_range(0.8..1.2);
    let sea = [
        0.07 + rng.random_range(-0.02..0.02),
        0.20 + rng.random_range(-0.03..0.03),
        0.30 + rng.random_range(-0.04..0.04),
    ];
    let wave_dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let wave_k: f32 = rng.random_range(0.4..0.9);
    let wave_phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let scale: f32 = rng.random_range(0.8..1.2);
    let length = 0.62 * s * scale;
    let beam = length * family.beam_ratio();
    let heading: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let margin = 0.4 * length;
    let cx = rng.random_range(margin..(s - margin).max(margin + 1.0));
    let cy = rng.random_range(margin..(s - margin).max(margin + 1.0));
    let boxes: Vec<[f32; 3]> = (0..40).map(|_| PALETTE[rng.random_range(0..PALETTE.len())]).collect();
    let noise = Normal::new(0.0f32, 0.025).expect("valid sigma");
    let (sin, cos) = heading.sin_cos();
    let (wsin, wcos) = wave_dir.sin_cos();
    let mut img = Image::filled(size, size, [0.0; 3]);
    const SUB: [f32; 2] = [0.25, 0.75];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0f32; 3];
            for sy in SUB {
                for sx in SUB {
                    let (px, py) = (x as f32 + sx - cx, y as f32 + sy - cy);
                    let a = (px * cos + py * sin) / (length / 2.0);
                    let b = (-px * sin + py * cos) / (beam / 2.0);
                    let c = hull_colour(family, a, b, &boxes).unwrap_or_else(|| {
                        let t = (x as f32 + sx) * wcos + (y as f32 + sy) * wsin;
                        let w = 0.03 * (wave_k * t + wave_phase).sin();
                        [sea[0] + w, sea[1] + w, sea[2] + w]
                    });
                    for k in 0..3 {
                        acc[k] += c[k] / 4.0;
                    }
                }
            }
            for (k, v) in acc.iter().enumerate() {
                let n = noise.sample(rng);
                img.set(k, y, x, (v * brightness + n).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Per-image stream: independent of how many images other classes get.
pub fn image_rng(seed: u64, class: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    rng
}

/// Writes `out/<family>/<family>_<index>.ppm`; returns the file count.
pub fn generate_synthetic(spec: &SynthSpec, out: &Path) -> Result<usize> {
    spec.validate()?;
    let mut written = 0;
    for (c, family) in Family::ALL.iter().take(spec.classes).enumerate() {
        let dir = out.join(family.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let img = render(*family, spec.size, &mut image_rng(spec.seed, c, i));
            let path = dir.join(format!("{}_{i:05}.ppm", family.name()));
            std::fs::write(&path, encode_ppm(&img)).map_err(|e| Error::io(&path, e))?;
            written += 1;
        }
    }
    Ok(written)
}
