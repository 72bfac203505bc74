use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_image, MetricsReport};
use crate::model::ModelHandle;
use crate::tensor::{bilinear_resize, FeatureMap};

/// Anything that maps a sample to a per-pixel vessel probability at the
/// ground-truth resolution. Models only look at the LR image.
pub trait Predictor {
    fn vessel_probability(&self, sample: &SamplePair) -> Result<Vec<f64>>;
}

/// Class probabilities `[1, n_classes, h, w]` for one LR image at HR size
/// `[h, w]`. Pads the input to the encoder multiple, crops the output when
/// it covers `[h, w]` and resizes bilinearly otherwise.
pub fn predict_hr(model: &ModelHandle, lr: &FeatureMap, hr: [usize; 2]) -> Result<FeatureMap> {
    let [_, _, h, w] = lr.shape();
    let m = model.config.input_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let input = if (ph, pw) == (h, w) { lr.clone() } else { lr.pad_to(ph, pw)? };
    let probs = model.forward_test(&input)?;
    let [th, tw] = hr;
    let n = model.config.upscale_factor;
    let (vh, vw) = (n * h, n * w);
    if (probs.height(), probs.width()) == (th, tw) {
        return Ok(probs);
    }
    if th <= vh && tw <= vw {
        return probs.crop_to(th, tw);
    }
    Ok(bilinear_resize(&probs.crop_to(vh, vw)?, th, tw))
}

impl Predictor for ModelHandle {
    fn vessel_probability(&self, sample: &SamplePair) -> Result<Vec<f64>> {
        let m = &sample.hr_mask;
        let probs = predict_hr(self, &sample.lr_image, [m.height, m.width])?;
        Ok(probs.plane(0, 1).to_vec())
    }
}

/// Per-image metrics of `predictor` on `samples` plus their aggregate.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, samples: &[SamplePair]) -> Result<MetricsReport> {
    let per_image = samples
        .iter()
        .map(|s| evaluate_image(&predictor.vessel_probability(s)?, &s.hr_mask.data))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&per_image)
}

/// [`evaluate`] for a model, rejecting data whose channel count differs
/// from the model's input channels.
pub fn evaluate_model(model: &ModelHandle, samples: &[SamplePair]) -> Result<MetricsReport> {
    if let Some(s) = samples.iter().find(|s| s.lr_image.channels() != model.config.in_channels) {
        return Err(Error::Config(format!(
            "checkpoint expects {} input channels, data has {}",
            model.config.in_channels,
            s.lr_image.channels()
        )));
    }
    evaluate(model, samples)
}
