//! Training objectives: cross-entropy on the segmentation probabilities,
//! the mixed MSE/SSIM super-resolution loss, and the interaction loss that
//! scores `seg * fim + seg` against the ground truth.
//!
//! Every loss comes in a value form and a `*_grad` form returning the value
//! together with the gradient w.r.t. the prediction(s).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the MSE term in the super-resolution loss.
    pub alpha: f64,
    /// Floor applied to probabilities before taking logs.
    pub eps: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            eps: 1e-7,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01f64.powi(2),
            ssim_c2: 0.03f64.powi(2),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.eps <= 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim_window must be odd, got {}", self.ssim_window)));
        }
        if self.ssim_sigma <= 0.0 {
            return Err(Error::Config("ssim_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_sr: f64,
    pub l_fim: f64,
    pub total: f64,
}

/// Sums the three terms, rejecting non-finite values by name.
pub fn total_loss(l_seg: f64, l_sr: f64, l_fim: f64) -> Result<LossReport> {
    for (term, v) in [("l_seg", l_seg), ("l_sr", l_sr), ("l_fim", l_fim)] {
        if !v.is_finite() {
            return Err(Error::Numeric { term });
        }
    }
    // Summed in sorted order so the total does not depend on term order.
    let mut terms = [l_seg, l_sr, l_fim];
    terms.sort_by(f64::total_cmp);
    Ok(LossReport {
        l_seg,
        l_sr,
        l_fim,
        total: terms[0] + terms[1] + terms[2],
    })
}

fn same_shape(a: &FeatureMap, b: &FeatureMap, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Normaliser shared by both cross-entropy terms: pixels x batch x classes.
fn ce_norm(x: &FeatureMap) -> f64 {
    (x.batch() * x.plane_len() * x.channels()) as f64
}

/// Cross-entropy `-(1/n) sum_i GT_i log p_i`, averaged over pixels and batch.
pub fn seg_loss(probs: &FeatureMap, gt_onehot: &FeatureMap, eps: f64) -> Result<f64> {
    Ok(seg_loss_grad(probs, gt_onehot, eps)?.0)
}

pub fn seg_loss_grad(probs: &FeatureMap, gt_onehot: &FeatureMap, eps: f64) -> Result<(f64, FeatureMap)> {
    same_shape(probs, gt_onehot, "seg_loss")?;
    let norm = ce_norm(probs);
    let mut grad = FeatureMap::zeros(probs.shape());
    let mut total = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(probs.data()).zip(gt_onehot.data()) {
        if t == 0.0 {
            continue;
        }
        // NaN must survive the floor so divergence is detected.
        let q = if p.is_nan() { p } else { p.max(eps) };
        total -= t * q.ln();
        if p > eps {
            *g = -t / (q * norm);
        }
    }
    Ok((total / norm, grad))
}

/// Interaction loss: cross-entropy of `clamp(seg * fim + seg, eps, 1)`.
pub fn fim_loss(probs: &FeatureMap, fim: &FeatureMap, gt_onehot: &FeatureMap, eps: f64) -> Result<f64> {
    Ok(fim_loss_grad(probs, fim, gt_onehot, eps)?.0)
}

/// Returns (loss, d/d probs, d/d fim).
pub fn fim_loss_grad(
    probs: &FeatureMap,
    fim: &FeatureMap,
    gt_onehot: &FeatureMap,
    eps: f64,
) -> Result<(f64, FeatureMap, FeatureMap)> {
    same_shape(probs, gt_onehot, "fim_loss")?;
    same_shape(probs, fim, "fim_loss")?;
    let norm = ce_norm(probs);
    let mut dprobs = FeatureMap::zeros(probs.shape());
    let mut dfim = FeatureMap::zeros(probs.shape());
    let mut total = 0.0;
    let it = probs.data().iter().zip(fim.data()).zip(gt_onehot.data());
    for (i, ((&s, &f), &t)) in it.enumerate() {
        if t == 0.0 {
            continue;
        }
        let raw = s * f + s;
        let q = raw.clamp(eps, 1.0);
        total -= t * q.ln();
        if raw > eps && raw < 1.0 {
            let dq = -t / (q * norm);
            dprobs.data_mut()[i] = dq * (f + 1.0);
            dfim.data_mut()[i] = dq * s;
        }
    }
    Ok((total / norm, dprobs, dfim))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - centre).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let row = &tmp[(y + t) * ow..(y + t + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(row) {
                *o += tap * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `(h-k+1) x (w-k+1)` map back
/// onto `h x w`.
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (t, &tap) in taps.iter().enumerate() {
            let dst = &mut tmp[(y + t) * ow..(y + t + 1) * ow];
            for (d, v) in dst.iter_mut().zip(&map[y * ow..(y + 1) * ow]) {
                *d += tap * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, &v) in row.iter().enumerate() {
            for (t, &tap) in taps.iter().enumerate() {
                dst[x + t] += tap * v;
            }
        }
    }
    out
}

/// Mean SSIM over a Gaussian-windowed local-statistics map, averaged over
/// channels and batch.
pub fn ssim(a: &FeatureMap, b: &FeatureMap, cfg: &LossConfig) -> Result<f64> {
    Ok(ssim_grad(a, b, cfg)?.0)
}

/// SSIM and its gradient w.r.t. the first argument.
pub fn ssim_grad(a: &FeatureMap, b: &FeatureMap, cfg: &LossConfig) -> Result<(f64, FeatureMap)> {
    same_shape(a, b, "ssim")?;
    let [bn, cn, h, w] = a.shape();
    let k = cfg.ssim_window;
    if h < k || w < k {
        return Err(shape_err(format!("ssim needs images of at least {k}x{k}, got {h}x{w}")));
    }
    let taps = gaussian_window(k, cfg.ssim_sigma);
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let map_len = (h + 1 - k) * (w + 1 - k);
    let planes = bn * cn;
    let scale = 1.0 / (map_len * planes) as f64;
    let mut total = 0.0;
    let mut grad = FeatureMap::zeros(a.shape());
    for bi in 0..bn {
        for ci in 0..cn {
            let pa = a.plane(bi, ci);
            let pb = b.plane(bi, ci);
            let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
            let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
            let mu_a = filter_valid(pa, h, w, &taps);
            let mu_b = filter_valid(pb, h, w, &taps);
            let e_aa = filter_valid(&sq_a, h, w, &taps);
            let e_bb = filter_valid(&sq_b, h, w, &taps);
            let e_ab = filter_valid(&ab, h, w, &taps);
            let mut d_mu = vec![0.0; map_len];
            let mut d_eab = vec![0.0; map_len];
            let mut d_eaa = vec![0.0; map_len];
            for p in 0..map_len {
                let (ma, mb) = (mu_a[p], mu_b[p]);
                let var_a = e_aa[p] - ma * ma;
                let var_b = e_bb[p] - mb * mb;
                let cov = e_ab[p] - ma * mb;
                let n1 = 2.0 * ma * mb + c1;
                let n2 = 2.0 * cov + c2;
                let d1 = ma * ma + mb * mb + c1;
                let d2 = var_a + var_b + c2;
                let s = n1 * n2 / (d1 * d2);
                total += s;
                // Partials with the raw moments E[a], E[ab], E[a^2] as the
                // independent variables.
                d_mu[p] = scale * ((2.0 * mb * n2 - 2.0 * mb * n1) / (d1 * d2) - s * (2.0 * ma / d1 - 2.0 * ma / d2));
                d_eab[p] = scale * 2.0 * n1 / (d1 * d2);
                d_eaa[p] = scale * (-s / d2);
            }
            let g_mu = filter_valid_adjoint(&d_mu, h, w, &taps);
            let g_ab = filter_valid_adjoint(&d_eab, h, w, &taps);
            let g_aa = filter_valid_adjoint(&d_eaa, h, w, &taps);
            let dst = grad.plane_mut(bi, ci);
            for q in 0..h * w {
                dst[q] = g_mu[q] + pb[q] * g_ab[q] + 2.0 * pa[q] * g_aa[q];
            }
        }
    }
    Ok((total * scale, grad))
}

/// `alpha * MSE + (1 - alpha) * (1 - SSIM)`.
pub fn sr_loss(sr: &FeatureMap, hr: &FeatureMap, cfg: &LossConfig) -> Result<f64> {
    Ok(sr_loss_grad(sr, hr, cfg)?.0)
}

pub fn sr_loss_grad(sr: &FeatureMap, hr: &FeatureMap, cfg: &LossConfig) -> Result<(f64, FeatureMap)> {
    same_shape(sr, hr, "sr_loss")?;
    let n = sr.len() as f64;
    let mse: f64 = sr.data().iter().zip(hr.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let mut grad = FeatureMap::zeros(sr.shape());
    for ((g, a), b) in grad.data_mut().iter_mut().zip(sr.data()).zip(hr.data()) {
        *g = cfg.alpha * 2.0 * (a - b) / n;
    }
    let mut value = cfg.alpha * mse;
    if cfg.alpha < 1.0 {
        let (s, ds) = ssim_grad(sr, hr, cfg)?;
        value += (1.0 - cfg.alpha) * (1.0 - s);
        for (g, d) in grad.data_mut().iter_mut().zip(ds.data()) {
            *g -= (1.0 - cfg.alpha) * d;
        }
    }
    Ok((value, grad))
}

/// Plain mean squared error.
pub fn mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    same_shape(a, b, "mse")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}
