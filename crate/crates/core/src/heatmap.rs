//! Attention visualizations: CBAM spatial-gate maps and gradient-weighted
//! class activation maps, blended over a grayscale copy of the input.

use std::path::Path;

use crate::data::image::resize_plane;
use crate::data::{encode_ppm, normalize, Image, Normalization};
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapMethod {
    SpatialGate,
    GradCam,
}

impl HeatmapMethod {
    pub fn label(self) -> &'static str {
        match self {
            HeatmapMethod::SpatialGate => "spatial-gate",
            HeatmapMethod::GradCam => "gradcam",
        }
    }
}

impl std::str::FromStr for HeatmapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial-gate" => Ok(HeatmapMethod::SpatialGate),
            "gradcam" => Ok(HeatmapMethod::GradCam),
            _ => Err(Error::Config(format!("unknown heatmap method {s:?} (spatial-gate or gradcam)"))),
        }
    }
}

/// Single-channel map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl HeatMap {
    pub fn resized(&self, target: (usize, usize)) -> Result<HeatMap> {
        Ok(HeatMap {
            height: target.0,
            width: target.1,
            values: resize_plane(&self.values, (self.height, self.width), target)?,
        })
    }

    pub fn range(&self) -> f32 {
        let (lo, hi) = self
            .values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }
}

/// Model input for one image: resized, normalized, batch of one.
pub fn input_tensor<T: Scalar>(img: &Image, norm: &Normalization) -> Result<Tensor<T>> {
    let n = normalize(img, norm)?;
    Tensor::new(
        &[1, 3, img.height(), img.width()],
        n.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Spatial gate of the last attention block in `stage` (default: the last
/// attention stage), upsampled to the input extents.
pub fn spatial_gate_map<T: Scalar>(model: &Model<T>, x: &Tensor<T>, stage: Option<usize>) -> Result<HeatMap> {
    let cfg = &model.config;
    let stage = match stage {
        Some(s) => s,
        None => *cfg
            .attention_stages
            .last()
            .ok_or_else(|| invalid!("the {} variant has no attention gates; use gradcam", cfg.variant))?,
    };
    if !cfg.attention_stages.contains(&stage) {
        return Err(invalid!("stage {stage} carries no attention block"));
    }
    let tape = Tape::new();
    let out = model.forward(&tape, tape.constant(x.clone()), ForwardOptions::eval())?;
    let gate = out.last_gates(stage).expect("attention stage yields gates").spatial.value();
    let s = gate.shape();
    let map = HeatMap {
        height: s[2],
        width: s[3],
        values: gate.data()[..s[2] * s[3]].iter().map(|v| v.as_f64() as f32).collect(),
    };
    map.resized(cfg.input_size)
}

/// `relu(sum_c w_c A_c)` with `w_c` the spatial mean of `dy/dA_c`, then
/// min-max scaled; a constant map becomes all zeros. Inputs are `[C, H, W]`.
pub fn cam_from_gradients(activation: &[f64], gradient: &[f64], c: usize, h: usize, w: usize) -> Result<HeatMap> {
    if activation.len() != c * h * w || gradient.len() != c * h * w {
        return Err(shape_err!("activation and gradient must both be {c}x{h}x{w}"));
    }
    let p = h * w;
    let mut cam = vec![0f64; p];
    for ch in 0..c {
        let weight = gradient[ch * p..(ch + 1) * p].iter().sum::<f64>() / p as f64;
        for (o, a) in cam.iter_mut().zip(&activation[ch * p..(ch + 1) * p]) {
            *o += weight * a;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let lo = cam.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = cam.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo {
        cam.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; p]
    };
    Ok(HeatMap {
        height: h,
        width: w,
        values,
    })
}

/// Grad-CAM at the output of `stage` (default 5) for `class` (default:
/// the predicted one), before upsampling.
pub fn gradcam_raw<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    stage: Option<usize>,
    class: Option<usize>,
) -> Result<(HeatMap, usize)> {
    let stage = stage.unwrap_or(5);
    if !(2..=5).contains(&stage) {
        return Err(invalid!("gradcam stage must be in 2..=5, got {stage}"));
    }
    if x.shape()[0] != 1 {
        return Err(shape_err!("gradcam takes one image, got a batch of {}", x.shape()[0]));
    }
    let tape = Tape::new();
    let out = model.forward(&tape, tape.constant(x.clone()), ForwardOptions::eval())?;
    let logits = out.logits.value();
    let k = logits.shape()[1];
    let class = class.unwrap_or_else(|| argmax(logits.data()));
    if class >= k {
        return Err(invalid!("class {class} out of range for {k} classes"));
    }
    let feature = out.feature(&format!("stage{stage}")).expect("stage outputs are recorded");
    let target = out.logits.slice(&[(0, 1), (class, class + 1)])?.sum_all()?;
    let grads = tape.backward(target)?;
    let g = grads
        .wrt(feature)
        .ok_or_else(|| Error::Backward("stage output received no gradient".into()))?;
    let a = feature.value();
    let s = a.shape();
    let map = cam_from_gradients(&a.to_f64_vec(), &g.to_f64_vec(), s[1], s[2], s[3])?;
    Ok((map, class))
}

pub fn gradcam_map<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    stage: Option<usize>,
    class: Option<usize>,
) -> Result<HeatMap> {
    gradcam_raw(model, x, stage, class)?.0.resized(model.config.input_size)
}

/// Three-stop ramp: blue at 0, yellow at 1/2, red at 1.
pub fn colormap(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.5 {
        let t = v / 0.5;
        [t, t, 1.0 - t]
    } else {
        let t = (v - 0.5) / 0.5;
        [1.0, 1.0 - t, 0.0]
    }
}

/// `0.5 gray(img) + 0.5 colormap(map)` per pixel.
pub fn overlay(img: &Image, map: &HeatMap) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if (map.height, map.width) != (h, w) {
        return Err(shape_err!(
            "map {}x{} does not match image {h}x{w}",
            map.height,
            map.width
        ));
    }
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let gray = 0.299 * img.at(0, y, x) + 0.587 * img.at(1, y, x) + 0.114 * img.at(2, y, x);
            let col = colormap(map.values[y * w + x]);
            for (c, v) in col.iter().enumerate() {
                out.set(c, y, x, (0.5 * gray + 0.5 * v).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

pub fn overlay_emit(img: &Image, map: &HeatMap, path: &Path) -> Result<()> {
    let blended = overlay(img, map)?;
    std::fs::write(path, encode_ppm(&blended)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::decode_ppm;
    use crate::model::{ModelConfig, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(64, 64, (0..3 * 64 * 64).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn zero_param(m: &mut Model<f64>, pred: impl Fn(&str) -> bool) {
        let ids: Vec<_> = m.store.ids().filter(|&id| pred(m.store.name(id))).collect();
        for id in ids {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zero_spatial_weights_give_half() {
        let mut m = Model::<f64>::build(&ModelConfig::tiny(Variant::Cbam), 1).unwrap();
        zero_param(&mut m, |n| n.contains(".cbam.spatial."));
        let x = input_tensor(&image(2), &Normalization::IDENTITY).unwrap();
        let map = spatial_gate_map(&m, &x, None).unwrap();
        assert_eq!((map.height, map.width), (64, 64));
        assert!(map.values.iter().all(|&v| v == 0.5));
        for s in 2..=5 {
            assert!(spatial_gate_map(&m, &x, Some(s)).is_ok());
        }
    }

    #[test]
    fn baseline_has_no_gates() {
        let m = Model::<f64>::build(&ModelConfig::tiny(Variant::Baseline), 1).unwrap();
        let x = input_tensor(&image(2), &Normalization::IDENTITY).unwrap();
        assert!(spatial_gate_map(&m, &x, None).is_err());
        assert!(gradcam_map(&m, &x, None, None).is_ok());
    }

    #[test]
    fn gradcam_zero_head_gives_zero_map() {
        let mut m = Model::<f64>::build(&ModelConfig::tiny(Variant::Baseline), 3).unwrap();
        zero_param(&mut m, |n| n == "head.fc.weight");
        let x = input_tensor(&image(4), &Normalization::IDENTITY).unwrap();
        let map = gradcam_map(&m, &x, None, Some(1)).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_min_max_and_bias_shift() {
        let mut m = Model::<f64>::build(&ModelConfig::tiny(Variant::Cbam), 5).unwrap();
        let x = input_tensor(&image(6), &Normalization::IDENTITY).unwrap();
        let (map, class) = gradcam_raw(&m, &x, Some(4), Some(2)).unwrap();
        assert_eq!(class, 2);
        if map.range() > 0.0 {
            let lo = map.values.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!((lo, hi), (0.0, 1.0));
        }
        let bias = m.head.bias;
        let mut b = m.store.value(bias).clone();
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            if i != 2 {
                *v += 3.5;
            }
        }
        m.store.set_value(bias, b).unwrap();
        let (shifted, _) = gradcam_raw(&m, &x, Some(4), Some(2)).unwrap();
        assert_eq!(map, shifted);
    }

    #[test]
    fn colormap_stops_and_overlay() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap(0.5), [1.0, 1.0, 0.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
        let img = image(7);
        let zeros = HeatMap {
            height: 64,
            width: 64,
            values: vec![0.0; 64 * 64],
        };
        let o = overlay(&img, &zeros).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                // blue tint: blue exceeds red and green by exactly one half
                assert!((o.at(2, y, x) - o.at(0, y, x) - 0.5).abs() < 1e-6);
                assert_eq!(o.at(0, y, x), o.at(1, y, x));
            }
        }
        let ones = HeatMap {
            values: vec![1.0; 64 * 64],
            ..zeros.clone()
        };
        let r = overlay(&img, &ones).unwrap();
        assert!((r.at(0, 3, 3) - r.at(1, 3, 3) - 0.5).abs() < 1e-6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.ppm");
        overlay_emit(&img, &ones, &p).unwrap();
        let back = decode_ppm(&std::fs::read(&p).unwrap()).unwrap();
        assert_eq!((back.height(), back.width()), (64, 64));
        let small = HeatMap {
            height: 2,
            width: 2,
            values: vec![0.0; 4],
        };
        assert!(overlay(&img, &small).is_err());
    }
}
