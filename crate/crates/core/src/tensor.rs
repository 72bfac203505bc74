//! Dense NCHW feature maps and the parameter-free operators used by the
//! network: pooling, bilinear resampling, concatenation, channel shuffle,
//! softmax and the pointwise activations. Each operator that sits inside the
//! trainable graph has a matching `*_backward` that applies its adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// A 4-axis (batch, channel, height, width) array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        assert!(
            shape.iter().all(|&d| d >= 1),
            "feature map extents must be >= 1, got {shape:?}"
        );
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err(format!("extents must be >= 1, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(shape_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(shape);
        let [b, c, h, w] = shape;
        let mut i = 0;
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.data[i] = f(bi, ci, y, x);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// All channels of one batch item, contiguous.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape[1] * self.plane_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.plane_len();
        let start = (b * self.shape[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        let start = (b * self.shape[1] + c) * n;
        &mut self.data[start..start + n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Selects a subset of batch items, in order.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(shape_err("empty batch selection"));
        }
        let n = self.shape[1] * self.plane_len();
        let mut data = Vec::with_capacity(n * indices.len());
        for &i in indices {
            if i >= self.shape[0] {
                return Err(shape_err(format!("batch index {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Self {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        })
    }

    /// Stacks single-item maps of equal (C, H, W) along the batch axis.
    pub fn stack(items: &[&FeatureMap]) -> Result<Self> {
        let first = items.first().ok_or_else(|| shape_err("cannot stack zero maps"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut batch = 0;
        for it in items {
            if it.shape[1..] != [c, h, w] {
                return Err(shape_err(format!(
                    "cannot stack {:?} with {:?}",
                    it.shape, first.shape
                )));
            }
            data.extend_from_slice(&it.data);
            batch += it.shape[0];
        }
        Ok(Self {
            shape: [batch, c, h, w],
            data,
        })
    }

    /// Replicate-pads on the bottom/right edges to the given extents.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Self> {
        let [b, c, h, w] = self.shape;
        if height < h || width < w {
            return Err(shape_err(format!(
                "cannot pad {h}x{w} down to {height}x{width}"
            )));
        }
        Ok(Self::from_fn([b, c, height, width], |bi, ci, y, x| {
            self.get(bi, ci, y.min(h - 1), x.min(w - 1))
        }))
    }

    /// Keeps the top-left `height` x `width` window.
    pub fn crop_to(&self, height: usize, width: usize) -> Result<Self> {
        let [b, c, h, w] = self.shape;
        if height > h || width > w || height == 0 || width == 0 {
            return Err(shape_err(format!(
                "cannot crop {h}x{w} to {height}x{width}"
            )));
        }
        Ok(Self::from_fn([b, c, height, width], |bi, ci, y, x| {
            self.get(bi, ci, y, x)
        }))
    }

    /// Adjoint of [`crop_to`](Self::crop_to): zero-extends to the original extents.
    pub fn uncrop(&self, height: usize, width: usize) -> Self {
        let [b, c, h, w] = self.shape;
        let mut out = Self::zeros([b, c, height, width]);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    let src = &self.plane(bi, ci)[y * w..(y + 1) * w];
                    out.plane_mut(bi, ci)[y * width..y * width + w].copy_from_slice(src);
                }
            }
        }
        out
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

pub fn relu_inplace(x: &mut FeatureMap) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` by `output > 0`, where `output` is the ReLU result.
pub fn relu_backward_inplace(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels(logits: &FeatureMap) -> FeatureMap {
    let [b, c, h, w] = logits.shape();
    let hw = h * w;
    let mut out = FeatureMap::zeros(logits.shape());
    for bi in 0..b {
        let src = logits.item(bi);
        let dst = out.item_mut(bi);
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(src[ci * hw + p]);
            }
            let mut z = 0.0;
            for ci in 0..c {
                let e = (src[ci * hw + p] - max).exp();
                dst[ci * hw + p] = e;
                z += e;
            }
            for ci in 0..c {
                dst[ci * hw + p] /= z;
            }
        }
    }
    out
}

/// Given softmax output `probs` and upstream gradient `grad_probs`,
/// returns the gradient w.r.t. the logits.
pub fn softmax_channels_backward(probs: &FeatureMap, grad_probs: &FeatureMap) -> FeatureMap {
    let [b, c, h, w] = probs.shape();
    let hw = h * w;
    let mut out = FeatureMap::zeros(probs.shape());
    for bi in 0..b {
        let p = probs.item(bi);
        let g = grad_probs.item(bi);
        let dst = out.item_mut(bi);
        for px in 0..hw {
            let mut dot = 0.0;
            for ci in 0..c {
                dot += p[ci * hw + px] * g[ci * hw + px];
            }
            for ci in 0..c {
                let i = ci * hw + px;
                dst[i] = p[i] * (g[i] - dot);
            }
        }
    }
    out
}

/// 2x2 max pooling with stride 2. Extents must be even.
pub fn max_pool2(x: &FeatureMap) -> Result<FeatureMap> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("max_pool2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = src[i].max(src[i + 1]).max(src[i + w]).max(src[i + w + 1]);
                }
            }
        }
    }
    Ok(out)
}

/// Routes each pooled gradient to the first maximal input of its window.
pub fn max_pool2_backward(input: &FeatureMap, grad_out: &FeatureMap) -> FeatureMap {
    let [b, c, h, w] = input.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = FeatureMap::zeros(input.shape());
    for bi in 0..b {
        for ci in 0..c {
            let src = input.plane(bi, ci);
            let g = grad_out.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let base = 2 * y * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[best] += g[y * ow + xx];
                }
            }
        }
    }
    out
}

/// Per-axis sampling taps for half-pixel-centred (non corner aligned)
/// bilinear resampling: destination index -> (lo, hi, weight of hi).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of every plane to `out_h` x `out_w`.
pub fn bilinear_resize(x: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let [b, c, h, w] = x.shape();
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = FeatureMap::zeros([b, c, out_h, out_w]);
    let mut row = vec![0.0; w];
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                for ((v, a), b) in row.iter_mut().zip(r0).zip(r1) {
                    *v = a * (1.0 - ly) + b * ly;
                }
                let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
                for (d, &(x0, x1, lx)) in drow.iter_mut().zip(&tx) {
                    *d = row[x0] * (1.0 - lx) + row[x1] * lx;
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`] from `grad_out` back to `in_h` x `in_w`.
pub fn bilinear_resize_backward(grad_out: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let [b, c, out_h, out_w] = grad_out.shape();
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut out = FeatureMap::zeros([b, c, in_h, in_w]);
    let mut row = vec![0.0; in_w];
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                let grow = &g[oy * out_w..(oy + 1) * out_w];
                for (gv, &(x0, x1, lx)) in grow.iter().zip(&tx) {
                    row[x0] += gv * (1.0 - lx);
                    row[x1] += gv * lx;
                }
                for (xx, &r) in row.iter().enumerate() {
                    dst[y0 * in_w + xx] += r * (1.0 - ly);
                    dst[y1 * in_w + xx] += r * ly;
                }
            }
        }
    }
    out
}

pub fn upsample(x: &FeatureMap, factor: usize) -> FeatureMap {
    bilinear_resize(x, x.height() * factor, x.width() * factor)
}

pub fn upsample_backward(grad_out: &FeatureMap, factor: usize) -> FeatureMap {
    bilinear_resize_backward(grad_out, grad_out.height() / factor, grad_out.width() / factor)
}

/// Concatenates along the channel axis.
pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
    let first = parts.first().ok_or_else(|| shape_err("concat of zero maps"))?;
    let [b, _, h, w] = first.shape();
    for p in parts {
        if p.batch() != b || p.height() != h || p.width() != w {
            return Err(shape_err(format!(
                "concat expects matching batch/spatial extents, got {:?} and {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for p in parts {
            data.extend_from_slice(p.item(bi));
        }
    }
    FeatureMap::from_vec([b, c, h, w], data)
}

/// Splits along the channel axis into consecutive blocks of the given sizes.
pub fn split_channels(x: &FeatureMap, sizes: &[usize]) -> Result<Vec<FeatureMap>> {
    let [b, c, h, w] = x.shape();
    if sizes.iter().sum::<usize>() != c {
        return Err(shape_err(format!("split sizes {sizes:?} do not sum to {c} channels")));
    }
    let hw = h * w;
    let mut out: Vec<FeatureMap> = sizes
        .iter()
        .map(|&s| FeatureMap::zeros([b, s, h, w]))
        .collect();
    for bi in 0..b {
        let src = x.item(bi);
        let mut start = 0;
        for (part, &s) in out.iter_mut().zip(sizes) {
            part.item_mut(bi).copy_from_slice(&src[start * hw..(start + s) * hw]);
            start += s;
        }
    }
    Ok(out)
}

/// Channel permutation used by [`channel_shuffle`]: output channel `k`
/// reads input channel `perm[k]`.
pub fn channel_shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(shape_err(format!(
            "channel shuffle needs channels ({channels}) divisible by groups ({groups})"
        )));
    }
    let per_group = channels / groups;
    Ok((0..channels)
        .map(|k| (k % groups) * per_group + k / groups)
        .collect())
}

fn permute_channels(x: &FeatureMap, perm: &[usize], inverse: bool) -> FeatureMap {
    let [b, _, _, _] = x.shape();
    let mut out = FeatureMap::zeros(x.shape());
    for bi in 0..b {
        for (k, &src) in perm.iter().enumerate() {
            let (from, to) = if inverse { (k, src) } else { (src, k) };
            let plane = x.plane(bi, from).to_vec();
            out.plane_mut(bi, to).copy_from_slice(&plane);
        }
    }
    out
}

/// Reshape-to-(groups, C/groups), transpose, flatten, along channels.
pub fn channel_shuffle(x: &FeatureMap, groups: usize) -> Result<FeatureMap> {
    let perm = channel_shuffle_permutation(x.channels(), groups)?;
    Ok(permute_channels(x, &perm, false))
}

/// Inverse of [`channel_shuffle`]; also its adjoint.
pub fn channel_unshuffle(x: &FeatureMap, groups: usize) -> Result<FeatureMap> {
    let perm = channel_shuffle_permutation(x.channels(), groups)?;
    Ok(permute_channels(x, &perm, true))
}
