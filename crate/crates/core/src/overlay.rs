//! Colour-coded comparison of a predicted mask against the ground truth.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    #[default]
    Black,
    /// The (HR) image underneath, converted to grey levels.
    Original,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlaySpec {
    pub gt_color: [u8; 3],
    pub pred_color: [u8; 3],
    pub match_color: [u8; 3],
    pub background: Background,
}

impl Default for OverlaySpec {
    fn default() -> Self {
        Self {
            gt_color: [0, 255, 0],
            pred_color: [255, 0, 0],
            match_color: [255, 255, 0],
            background: Background::Black,
        }
    }
}

impl OverlaySpec {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = [self.gt_color, self.pred_color, self.match_color];
        if a == b || b == c || a == c {
            return Err(Error::Config("overlay colours must be pairwise distinct".into()));
        }
        Ok(())
    }

    /// Colour of one pixel; `None` means background.
    pub fn classify(&self, pred: bool, gt: bool) -> Option<[u8; 3]> {
        match (pred, gt) {
            (true, true) => Some(self.match_color),
            (true, false) => Some(self.pred_color),
            (false, true) => Some(self.gt_color),
            (false, false) => None,
        }
    }
}

fn grey(image: &FeatureMap, y: usize, x: usize) -> u8 {
    let c = image.channels();
    let v = (0..c).map(|k| image.get(0, k, y, x)).sum::<f64>() / c as f64;
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Green where only the ground truth marks a vessel, red where only the
/// prediction does, yellow where both agree.
pub fn render_overlay(pred: &Mask, gt: &Mask, spec: &OverlaySpec, image: Option<&FeatureMap>) -> Result<RgbImage> {
    spec.validate()?;
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Validation(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (h, w) = (gt.height, gt.width);
    let under = match (spec.background, image) {
        (Background::Black, _) => None,
        (Background::Original, Some(img)) if img.height() == h && img.width() == w => Some(img),
        (Background::Original, Some(img)) => {
            return Err(Error::Validation(format!(
                "background image is {}x{}, masks {h}x{w}",
                img.height(),
                img.width()
            )))
        }
        (Background::Original, None) => {
            return Err(Error::Config("original-image background needs an image".into()))
        }
    };
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rgb = spec.classify(pred.data[i] == 1, gt.data[i] == 1).unwrap_or_else(|| match under {
                Some(img) => [grey(img, y, x); 3],
                None => [0, 0, 0],
            });
            out.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }
    Ok(out)
}
