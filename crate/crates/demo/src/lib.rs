//! Browser demo. Generates a synthetic fundus-like sample, shows its
//! simulated low-resolution input next to nearest and bilinear upsampling,
//! and thresholds a darkness score into a colour-coded overlay with metrics.
//!
//! Everything below the `wasm_bindgen` wrappers is plain Rust so it can be
//! tested natively.

use wasm_bindgen::prelude::*;

use supervessel::data::{generate_synthetic, Mask, SamplePair, SyntheticConfig};
use supervessel::metrics::{auc, confusion, scalar_metrics};
use supervessel::overlay::{render_overlay, Background, OverlaySpec};
use supervessel::tensor::{bilinear_resize, FeatureMap};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGBA bytes of the first item of a 1- or 3-channel map.
pub fn map_to_rgba(x: &FeatureMap) -> Vec<u8> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for xx in 0..w {
            for k in 0..3 {
                out.push(to_byte(x.get(0, k.min(c - 1), y, xx)));
            }
            out.push(255);
        }
    }
    out
}

fn nearest(x: &FeatureMap, factor: usize) -> FeatureMap {
    let [b, c, h, w] = x.shape();
    FeatureMap::from_fn([b, c, h * factor, w * factor], |bi, ci, y, xx| x.get(bi, ci, y / factor, xx / factor))
}

/// Vessel score in [0, 1] from the bilinearly upsampled input: darkness of
/// the green (or only) channel, min-max normalised.
pub fn darkness_score(sample: &SamplePair) -> Vec<f64> {
    let up = bilinear_resize(&sample.lr_image, sample.hr_mask.height, sample.hr_mask.width);
    let ch = if up.channels() >= 2 { 1 } else { 0 };
    let g = up.plane(0, ch);
    let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    g.iter().map(|&v| (hi - v) / span).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub se: f64,
    pub iou: f64,
    pub dice: f64,
    pub acc: f64,
    pub auc: Option<f64>,
}

pub fn threshold_scores(score: &[f64], gt: &Mask, threshold: f64) -> supervessel::Result<(Mask, Scores)> {
    let pred: Vec<u8> = score.iter().map(|&s| (s >= threshold) as u8).collect();
    let m = scalar_metrics(&confusion(&pred, &gt.data)?);
    let scores = Scores {
        se: m.se,
        iou: m.iou,
        dice: m.dice,
        acc: m.acc,
        auc: auc(score, &gt.data)?,
    };
    Ok((Mask::new(gt.height, gt.width, pred)?, scores))
}

fn js_err(e: supervessel::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// One synthetic sample and its vessel score.
#[wasm_bindgen]
pub struct Scene {
    sample: SamplePair,
    factor: usize,
    score: Vec<f64>,
    scores: Option<Scores>,
}

#[wasm_bindgen]
impl Scene {
    /// `size` is the HR side length; `factor` the downsampling factor.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, factor: u32) -> Result<Scene, JsValue> {
        let cfg = SyntheticConfig {
            n_images: 1,
            hr_size: [size as usize, size as usize],
            lr_factor: factor as usize,
            seed: seed as u64,
            ..SyntheticConfig::default()
        };
        let sample = generate_synthetic(&cfg).map_err(js_err)?.remove(0);
        let score = darkness_score(&sample);
        Ok(Scene {
            sample,
            factor: factor as usize,
            score,
            scores: None,
        })
    }

    pub fn hr_size(&self) -> u32 {
        self.sample.hr_mask.width as u32
    }

    pub fn lr_size(&self) -> u32 {
        self.sample.lr_image.width() as u32
    }

    pub fn hr_rgba(&self) -> Vec<u8> {
        map_to_rgba(&self.sample.hr_image)
    }

    pub fn lr_rgba(&self) -> Vec<u8> {
        map_to_rgba(&self.sample.lr_image)
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        let m = &self.sample.hr_mask;
        map_to_rgba(&FeatureMap::from_fn([1, 1, m.height, m.width], |_, _, y, x| m.data[y * m.width + x] as f64))
    }

    /// LR input brought back to HR size, bilinearly or by pixel repetition.
    pub fn upsampled_rgba(&self, bilinear: bool) -> Vec<u8> {
        let lr = &self.sample.lr_image;
        let up = if bilinear {
            bilinear_resize(lr, lr.height() * self.factor, lr.width() * self.factor)
        } else {
            nearest(lr, self.factor)
        };
        map_to_rgba(&up)
    }

    /// Thresholds the score and returns the overlay (green: missed vessel,
    /// red: false vessel, yellow: agreement). Metrics are read afterwards.
    pub fn overlay_rgba(&mut self, threshold: f64, over_image: bool) -> Result<Vec<u8>, JsValue> {
        let (pred, scores) = threshold_scores(&self.score, &self.sample.hr_mask, threshold).map_err(js_err)?;
        self.scores = Some(scores);
        let spec = OverlaySpec {
            background: if over_image { Background::Original } else { Background::Black },
            ..OverlaySpec::default()
        };
        let img = render_overlay(&pred, &self.sample.hr_mask, &spec, Some(&self.sample.hr_image)).map_err(js_err)?;
        Ok(img
            .pixels()
            .flat_map(|p| [p.0[0], p.0[1], p.0[2], 255])
            .collect())
    }

    /// `[SE, IoU, Dice, ACC, AUC]` in percent from the last overlay; AUC is
    /// NaN when the mask has a single class.
    pub fn metrics(&self) -> Vec<f64> {
        match self.scores {
            Some(s) => vec![
                100.0 * s.se,
                100.0 * s.iou,
                100.0 * s.dice,
                100.0 * s.acc,
                s.auc.map_or(f64::NAN, |a| 100.0 * a),
            ],
            None => Vec::new(),
        }
    }
}
