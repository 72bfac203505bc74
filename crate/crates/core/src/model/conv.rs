//! Stride-1 "same" 2-D convolution (optionally dilated) lowered to GEMM
//! through im2col.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamSet, Tensor};
use crate::error::{shape_err, Result};
use crate::tensor::FeatureMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            dilation: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.patch_len() * self.out_channels + self.out_channels
    }

    /// He (fan-in) normal kernel, zero bias.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        let std = (2.0 / self.patch_len() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut w = Tensor::zeros(vec![self.out_channels, self.in_channels, self.kernel, self.kernel]);
        for v in &mut w.data {
            *v = normal.sample(rng);
        }
        params.insert(self.weight_name(), w);
        params.insert(self.bias_name(), Tensor::zeros(vec![self.out_channels]));
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(shape_err(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamSet, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let w = params.get(&self.weight_name())?;
        let bias = params.get(&self.bias_name())?;
        let [b, _, h, wd] = x.shape();
        let hw = h * wd;
        let k = self.patch_len();
        let mut out = FeatureMap::zeros([b, self.out_channels, h, wd]);
        let mut cols = if self.kernel == 1 { Vec::new() } else { vec![0.0; k * hw] };
        for bi in 0..b {
            let src: &[f64] = if self.kernel == 1 {
                x.item(bi)
            } else {
                im2col(x.item(bi), self.in_channels, h, wd, self.kernel, self.dilation, &mut cols);
                &cols
            };
            let dst = out.item_mut(bi);
            for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias.data[co]);
            }
            gemm(self.out_channels, k, hw, &w.data, (k, 1), src, (hw, 1), dst, 1.0);
        }
        Ok(out)
    }

    /// Accumulates kernel/bias gradients into `grads` and returns the
    /// gradient w.r.t. `x` (the input given to the matching forward).
    pub fn backward(
        &self,
        params: &ParamSet,
        x: &FeatureMap,
        grad_out: &FeatureMap,
        grads: &mut ParamSet,
    ) -> Result<FeatureMap> {
        self.check_input(x)?;
        let w = params.get(&self.weight_name())?;
        let [b, _, h, wd] = x.shape();
        if grad_out.shape() != [b, self.out_channels, h, wd] {
            return Err(shape_err(format!(
                "{}: gradient shape {:?} does not match output",
                self.name,
                grad_out.shape()
            )));
        }
        let hw = h * wd;
        let k = self.patch_len();
        let mut dx = FeatureMap::zeros(x.shape());
        let mut cols = if self.kernel == 1 { Vec::new() } else { vec![0.0; k * hw] };
        let mut dcols = vec![0.0; k * hw];
        let mut dw = vec![0.0; k * self.out_channels];
        let mut db = vec![0.0; self.out_channels];
        for bi in 0..b {
            let dy = grad_out.item(bi);
            for (co, plane) in dy.chunks_exact(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
            let src: &[f64] = if self.kernel == 1 {
                x.item(bi)
            } else {
                im2col(x.item(bi), self.in_channels, h, wd, self.kernel, self.dilation, &mut cols);
                &cols
            };
            // dW[co, j] += sum_p dy[co, p] * cols[j, p]
            gemm(self.out_channels, hw, k, dy, (hw, 1), src, (1, hw), &mut dw, 1.0);
            // dcols[j, p] = sum_co W[co, j] * dy[co, p]
            if self.kernel == 1 {
                gemm(k, self.out_channels, hw, &w.data, (1, k), dy, (hw, 1), dx.item_mut(bi), 0.0);
            } else {
                gemm(k, self.out_channels, hw, &w.data, (1, k), dy, (hw, 1), &mut dcols, 0.0);
                col2im(&dcols, self.in_channels, h, wd, self.kernel, self.dilation, dx.item_mut(bi));
            }
        }
        let gw = grads.entry_zeros(&self.weight_name(), &w.shape);
        for (g, d) in gw.data.iter_mut().zip(&dw) {
            *g += d;
        }
        let gb = grads.entry_zeros(&self.bias_name(), &[self.out_channels]);
        for (g, d) in gb.data.iter_mut().zip(&db) {
            *g += d;
        }
        Ok(dx)
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with explicit (row, col)
/// strides for `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid source range `[lo, hi)` of destination indices for a tap offset.
fn tap_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, dil: usize, cols: &mut [f64]) {
    let hw = h * w;
    let pad = (dil * (k - 1) / 2) as isize;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = (ky * dil) as isize - pad;
            let (y_lo, y_hi) = tap_range(h, oy);
            for kx in 0..k {
                let ox = (kx * dil) as isize - pad;
                let (x_lo, x_hi) = tap_range(w, ox);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                dst.fill(0.0);
                for y in y_lo..y_hi {
                    let sy = (y as isize + oy) as usize;
                    let sx0 = (x_lo as isize + ox) as usize;
                    let n = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + n]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dil: usize, dx: &mut [f64]) {
    let hw = h * w;
    let pad = (dil * (k - 1) / 2) as isize;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = (ky * dil) as isize - pad;
            let (y_lo, y_hi) = tap_range(h, oy);
            for kx in 0..k {
                let ox = (kx * dil) as isize - pad;
                let (x_lo, x_hi) = tap_range(w, ox);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in y_lo..y_hi {
                    let sy = (y as isize + oy) as usize;
                    let sx0 = (x_lo as isize + ox) as usize;
                    let n = x_hi - x_lo;
                    for (d, s) in plane[sy * w + sx0..sy * w + sx0 + n]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}
