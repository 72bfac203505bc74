//! Layer inventory and the forward/backward wiring of the dual-stream
//! network. Names follow `encoder.stage{i}`, `dec_seg.stage{i}`, `ufd`,
//! `dec_sr.stage{i}`, `dec_sr.head` and `fim`.

use super::conv::Conv2d;
use super::params::ParamSet;
use super::{Branches, ModelConfig};
use crate::error::Result;
use crate::tensor::{self, FeatureMap};

pub(crate) const FIM_DILATIONS: [usize; 3] = [1, 2, 4];

/// conv3x3 + ReLU, twice.
#[derive(Clone, Debug)]
pub(crate) struct DoubleConv {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub(crate) struct DoubleConvTrace {
    input: FeatureMap,
    hidden: FeatureMap,
    output: FeatureMap,
}

impl DoubleConv {
    fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv1: Conv2d::new(format!("{prefix}.conv1"), cin, cout, 3),
            conv2: Conv2d::new(format!("{prefix}.conv2"), cout, cout, 3),
        }
    }

    fn convs(&self) -> [&Conv2d; 2] {
        [&self.conv1, &self.conv2]
    }

    fn forward(&self, p: &ParamSet, x: &FeatureMap) -> Result<FeatureMap> {
        let mut h = self.conv1.forward(p, x)?;
        tensor::relu_inplace(&mut h);
        let mut y = self.conv2.forward(p, &h)?;
        tensor::relu_inplace(&mut y);
        Ok(y)
    }

    fn forward_traced(&self, p: &ParamSet, x: FeatureMap) -> Result<DoubleConvTrace> {
        let mut hidden = self.conv1.forward(p, &x)?;
        tensor::relu_inplace(&mut hidden);
        let mut output = self.conv2.forward(p, &hidden)?;
        tensor::relu_inplace(&mut output);
        Ok(DoubleConvTrace {
            input: x,
            hidden,
            output,
        })
    }

    fn backward(
        &self,
        p: &ParamSet,
        t: &DoubleConvTrace,
        mut grad: FeatureMap,
        grads: &mut ParamSet,
    ) -> Result<FeatureMap> {
        tensor::relu_backward_inplace(&t.output, &mut grad);
        let mut dh = self.conv2.backward(p, &t.hidden, &grad, grads)?;
        tensor::relu_backward_inplace(&t.hidden, &mut dh);
        self.conv1.backward(p, &t.input, &dh, grads)
    }
}

/// U-Net contracting path: stage 0 at input resolution, each later stage
/// max-pools by 2 first.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    pub stages: Vec<DoubleConv>,
}

pub(crate) struct EncoderTrace {
    stages: Vec<DoubleConvTrace>,
}

impl EncoderTrace {
    pub fn skips(&self) -> Vec<&FeatureMap> {
        self.stages.iter().map(|s| &s.output).collect()
    }
}

impl Encoder {
    fn new(in_channels: usize, widths: &[usize]) -> Self {
        let mut cin = in_channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = DoubleConv::new(&format!("encoder.stage{i}"), cin, w);
                cin = w;
                s
            })
            .collect();
        Self { stages }
    }

    pub fn forward(&self, p: &ParamSet, x: &FeatureMap) -> Result<Vec<FeatureMap>> {
        let mut skips: Vec<FeatureMap> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let out = if i == 0 {
                stage.forward(p, x)?
            } else {
                stage.forward(p, &tensor::max_pool2(&skips[i - 1])?)?
            };
            skips.push(out);
        }
        Ok(skips)
    }

    pub fn forward_traced(&self, p: &ParamSet, x: &FeatureMap) -> Result<EncoderTrace> {
        let mut stages: Vec<DoubleConvTrace> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let input = if i == 0 {
                x.clone()
            } else {
                tensor::max_pool2(&stages[i - 1].output)?
            };
            stages.push(stage.forward_traced(p, input)?);
        }
        Ok(EncoderTrace { stages })
    }

    /// `skip_grads[i]` is the gradient w.r.t. stage `i`'s output.
    pub fn backward(
        &self,
        p: &ParamSet,
        t: &EncoderTrace,
        mut skip_grads: Vec<FeatureMap>,
        grads: &mut ParamSet,
    ) -> Result<()> {
        let last = self.stages.len() - 1;
        let mut g = skip_grads.pop().expect("one gradient per stage");
        for i in (0..=last).rev() {
            let dx = self.stages[i].backward(p, &t.stages[i], g, grads)?;
            if i == 0 {
                break;
            }
            let mut prev = tensor::max_pool2_backward(&t.stages[i - 1].output, &dx);
            prev.add_assign(&skip_grads[i - 1]);
            g = prev;
        }
        Ok(())
    }
}

/// U-Net expanding path: bilinear x2, concat with the skip, double conv.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    /// `stages[i]` produces level-`i` features (width `widths[i]`).
    pub stages: Vec<DoubleConv>,
    widths: Vec<usize>,
}

pub(crate) struct DecoderTrace {
    /// Indexed by level, `None` for the deepest level.
    stages: Vec<Option<DoubleConvTrace>>,
}

impl Decoder {
    fn new(prefix: &str, widths: &[usize]) -> Self {
        let stages = (0..widths.len() - 1)
            .map(|i| DoubleConv::new(&format!("{prefix}.stage{i}"), widths[i + 1] + widths[i], widths[i]))
            .collect();
        Self {
            stages,
            widths: widths.to_vec(),
        }
    }

    pub fn forward(&self, p: &ParamSet, skips: &[FeatureMap]) -> Result<FeatureMap> {
        let depth = self.widths.len();
        let mut h = skips[depth - 1].clone();
        for i in (0..depth - 1).rev() {
            let up = tensor::upsample(&h, 2);
            let cat = tensor::concat_channels(&[&up, &skips[i]])?;
            h = self.stages[i].forward(p, &cat)?;
        }
        Ok(h)
    }

    pub fn forward_traced(&self, p: &ParamSet, skips: &[&FeatureMap]) -> Result<(FeatureMap, DecoderTrace)> {
        let depth = self.widths.len();
        let mut traces: Vec<Option<DoubleConvTrace>> = (0..depth).map(|_| None).collect();
        let mut h = skips[depth - 1].clone();
        for i in (0..depth - 1).rev() {
            let up = tensor::upsample(&h, 2);
            let cat = tensor::concat_channels(&[&up, skips[i]])?;
            let t = self.stages[i].forward_traced(p, cat)?;
            h = t.output.clone();
            traces[i] = Some(t);
        }
        Ok((h, DecoderTrace { stages: traces }))
    }

    /// Returns the gradient w.r.t. every skip (level order).
    pub fn backward(
        &self,
        p: &ParamSet,
        t: &DecoderTrace,
        grad_out: FeatureMap,
        grads: &mut ParamSet,
    ) -> Result<Vec<FeatureMap>> {
        let depth = self.widths.len();
        let mut skip_grads = Vec::with_capacity(depth);
        let mut g = grad_out;
        for i in 0..depth - 1 {
            let trace = t.stages[i].as_ref().expect("traced decoder stage");
            let dcat = self.stages[i].backward(p, trace, g, grads)?;
            let mut parts = tensor::split_channels(&dcat, &[self.widths[i + 1], self.widths[i]])?;
            let dskip = parts.pop().expect("two parts");
            let dup = parts.pop().expect("two parts");
            skip_grads.push(dskip);
            g = tensor::upsample_backward(&dup, 2);
        }
        skip_grads.push(g);
        Ok(skip_grads)
    }
}

/// Segmentation head. With feature decomposition a 1x1 conv splits the
/// decoder features into one channel per class before bilinear upsampling;
/// without it a single vessel logit is upsampled and the background logit
/// is pinned at zero.
#[derive(Clone, Debug)]
pub(crate) enum SegHead {
    Decomposed(Conv2d),
    SingleLogit(Conv2d),
}

impl SegHead {
    fn conv(&self) -> &Conv2d {
        match self {
            SegHead::Decomposed(c) | SegHead::SingleLogit(c) => c,
        }
    }

    pub fn forward(&self, p: &ParamSet, features: &FeatureMap, factor: usize) -> Result<FeatureMap> {
        let z = tensor::upsample(&self.conv().forward(p, features)?, factor);
        match self {
            SegHead::Decomposed(_) => Ok(z),
            SegHead::SingleLogit(_) => {
                let zero = FeatureMap::zeros(z.shape());
                tensor::concat_channels(&[&zero, &z])
            }
        }
    }

    pub fn backward(
        &self,
        p: &ParamSet,
        features: &FeatureMap,
        grad_logits: &FeatureMap,
        factor: usize,
        grads: &mut ParamSet,
    ) -> Result<FeatureMap> {
        let dz = match self {
            SegHead::Decomposed(_) => grad_logits.clone(),
            SegHead::SingleLogit(_) => tensor::split_channels(grad_logits, &[1, 1])?.pop().expect("two parts"),
        };
        let dconv = tensor::upsample_backward(&dz, factor);
        self.conv().backward(p, features, &dconv, grads)
    }
}

/// Super-resolution head: bilinear upsampling of the decoder features,
/// conv3x3 + ReLU, then a 1x1 projection to image channels.
#[derive(Clone, Debug)]
pub(crate) struct SrHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub(crate) struct SrHeadTrace {
    up: FeatureMap,
    hidden: FeatureMap,
}

impl SrHead {
    fn forward_traced(&self, p: &ParamSet, features: &FeatureMap, factor: usize) -> Result<(FeatureMap, SrHeadTrace)> {
        let up = tensor::upsample(features, factor);
        let mut hidden = self.conv1.forward(p, &up)?;
        tensor::relu_inplace(&mut hidden);
        let out = self.conv2.forward(p, &hidden)?;
        Ok((out, SrHeadTrace { up, hidden }))
    }

    fn backward(&self, p: &ParamSet, t: &SrHeadTrace, grad: &FeatureMap, factor: usize, grads: &mut ParamSet) -> Result<FeatureMap> {
        let mut dh = self.conv2.backward(p, &t.hidden, grad, grads)?;
        tensor::relu_backward_inplace(&t.hidden, &mut dh);
        let dup = self.conv1.backward(p, &t.up, &dh, grads)?;
        Ok(tensor::upsample_backward(&dup, factor))
    }
}

/// Feature interaction module.
#[derive(Clone, Debug)]
pub(crate) struct Fim {
    pub proj: Conv2d,
    pub dilated: [Conv2d; 3],
    pub integrate: Conv2d,
    pub refine: Conv2d,
    pub out: Conv2d,
    seg_channels: usize,
    sr_channels: usize,
    dim: usize,
}

pub(crate) struct FimTrace {
    input: FeatureMap,
    projected: FeatureMap,
    groups: Vec<FeatureMap>,
    shuffled: FeatureMap,
    integrated: FeatureMap,
    refined: FeatureMap,
    output: FeatureMap,
}

impl Fim {
    pub fn new(seg_channels: usize, sr_channels: usize, dim: usize, out_channels: usize) -> Self {
        let g = dim / 3;
        Self {
            proj: Conv2d::new("fim.proj", seg_channels + sr_channels, dim, 1),
            dilated: FIM_DILATIONS.map(|d| Conv2d::new(format!("fim.dil{d}"), g, g, 3).dilated(d)),
            integrate: Conv2d::new("fim.integrate", dim, dim, 1),
            refine: Conv2d::new("fim.refine", dim, dim, 1),
            out: Conv2d::new("fim.out", dim, out_channels, 1),
            seg_channels,
            sr_channels,
            dim,
        }
    }

    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v = vec![&self.proj];
        v.extend(self.dilated.iter());
        v.extend([&self.integrate, &self.refine, &self.out]);
        v
    }

    pub fn forward(&self, p: &ParamSet, seg_probs: &FeatureMap, sr: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_traced(p, seg_probs, sr)?.output)
    }

    pub fn forward_traced(&self, p: &ParamSet, seg_probs: &FeatureMap, sr: &FeatureMap) -> Result<FimTrace> {
        if seg_probs.shape()[2..] != sr.shape()[2..] || seg_probs.batch() != sr.batch() {
            return Err(crate::error::shape_err(format!(
                "FIM inputs disagree: segmentation {:?} vs super-resolution {:?}",
                seg_probs.shape(),
                sr.shape()
            )));
        }
        let input = tensor::concat_channels(&[seg_probs, sr])?;
        let mut projected = self.proj.forward(p, &input)?;
        tensor::relu_inplace(&mut projected);
        let g = self.dim / 3;
        let groups = tensor::split_channels(&projected, &[g, g, g])?;
        let scaled: Vec<FeatureMap> = self
            .dilated
            .iter()
            .zip(&groups)
            .map(|(conv, x)| conv.forward(p, x))
            .collect::<Result<_>>()?;
        let cat = tensor::concat_channels(&scaled.iter().collect::<Vec<_>>())?;
        let shuffled = tensor::channel_shuffle(&cat, 3)?;
        let integrated = self.integrate.forward(p, &shuffled)?;
        let mut refined = self.refine.forward(p, &integrated)?;
        tensor::relu_inplace(&mut refined);
        let output = self.out.forward(p, &refined)?.map(tensor::sigmoid);
        Ok(FimTrace {
            input,
            projected,
            groups,
            shuffled,
            integrated,
            refined,
            output,
        })
    }

    /// Returns gradients w.r.t. (segmentation probabilities, SR image).
    pub fn backward(&self, p: &ParamSet, t: &FimTrace, grad_out: &FeatureMap, grads: &mut ParamSet) -> Result<(FeatureMap, FeatureMap)> {
        let mut dz = grad_out.clone();
        for (g, &o) in dz.data_mut().iter_mut().zip(t.output.data()) {
            *g *= o * (1.0 - o);
        }
        let mut dref = self.out.backward(p, &t.refined, &dz, grads)?;
        tensor::relu_backward_inplace(&t.refined, &mut dref);
        let dint = self.refine.backward(p, &t.integrated, &dref, grads)?;
        let dshuf = self.integrate.backward(p, &t.shuffled, &dint, grads)?;
        let dcat = tensor::channel_unshuffle(&dshuf, 3)?;
        let g = self.dim / 3;
        let dscaled = tensor::split_channels(&dcat, &[g, g, g])?;
        let dgroups: Vec<FeatureMap> = self
            .dilated
            .iter()
            .zip(t.groups.iter().zip(&dscaled))
            .map(|(conv, (x, dy))| conv.backward(p, x, dy, grads))
            .collect::<Result<_>>()?;
        let mut dproj = tensor::concat_channels(&dgroups.iter().collect::<Vec<_>>())?;
        tensor::relu_backward_inplace(&t.projected, &mut dproj);
        let dinput = self.proj.backward(p, &t.input, &dproj, grads)?;
        let mut parts = tensor::split_channels(&dinput, &[self.seg_channels, self.sr_channels])?;
        let dsr = parts.pop().expect("two parts");
        let dseg = parts.pop().expect("two parts");
        Ok((dseg, dsr))
    }
}

/// Full layer inventory derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub(crate) struct Network {
    pub encoder: Encoder,
    pub dec_seg: Decoder,
    pub seg_head: SegHead,
    pub dec_sr: Option<(Decoder, SrHead)>,
    pub fim: Option<Fim>,
    pub factor: usize,
}

impl Network {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = &cfg.encoder_widths;
        let Branches { asr, ufd, fim } = cfg.branches;
        let seg_head = if ufd {
            SegHead::Decomposed(Conv2d::new("ufd.conv", w[0], cfg.n_classes, 1))
        } else {
            SegHead::SingleLogit(Conv2d::new("seg_head.conv", w[0], 1, 1))
        };
        let dec_sr = asr.then(|| {
            (
                Decoder::new("dec_sr", w),
                SrHead {
                    conv1: Conv2d::new("dec_sr.head.conv1", w[0], w[0], 3),
                    conv2: Conv2d::new("dec_sr.head.conv2", w[0], cfg.sr_out_channels, 1),
                },
            )
        });
        let fim = fim.then(|| Fim::new(cfg.n_classes, cfg.sr_out_channels, cfg.fim_dim, cfg.n_classes));
        Self {
            encoder: Encoder::new(cfg.in_channels, w),
            dec_seg: Decoder::new("dec_seg", w),
            seg_head,
            dec_sr,
            fim,
            factor: cfg.upscale_factor,
        }
    }

    /// Layers evaluated by the test-phase forward.
    pub fn test_convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = Vec::new();
        for s in self.encoder.stages.iter().chain(&self.dec_seg.stages) {
            v.extend(s.convs());
        }
        v.push(self.seg_head.conv());
        v
    }

    /// Layers only evaluated during training.
    pub fn train_only_convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = Vec::new();
        if let Some((dec, head)) = &self.dec_sr {
            for s in &dec.stages {
                v.extend(s.convs());
            }
            v.extend([&head.conv1, &head.conv2]);
        }
        if let Some(f) = &self.fim {
            v.extend(f.convs());
        }
        v
    }

    /// Segmentation logits and probabilities from encoder skips.
    pub fn segment(&self, p: &ParamSet, skips: &[FeatureMap]) -> Result<(FeatureMap, FeatureMap)> {
        let feats = self.dec_seg.forward(p, skips)?;
        let logits = self.seg_head.forward(p, &feats, self.factor)?;
        let probs = tensor::softmax_channels(&logits);
        Ok((logits, probs))
    }
}

/// Everything the backward pass needs from one training forward.
pub(crate) struct ForwardTrace {
    encoder: EncoderTrace,
    seg_decoder: DecoderTrace,
    seg_features: FeatureMap,
    sr: Option<(DecoderTrace, FeatureMap, SrHeadTrace)>,
    fim: Option<FimTrace>,
}

pub(crate) struct TracedOutputs {
    pub logits: FeatureMap,
    pub probs: FeatureMap,
    pub sr: Option<FeatureMap>,
    pub fim: Option<FeatureMap>,
    pub trace: ForwardTrace,
}

impl Network {
    pub fn forward_traced(&self, p: &ParamSet, x: &FeatureMap) -> Result<TracedOutputs> {
        let encoder = self.encoder.forward_traced(p, x)?;
        let skips = encoder.skips();
        let (seg_features, seg_decoder) = self.dec_seg.forward_traced(p, &skips)?;
        let logits = self.seg_head.forward(p, &seg_features, self.factor)?;
        let probs = tensor::softmax_channels(&logits);
        let (sr_out, sr_trace) = match &self.dec_sr {
            Some((dec, head)) => {
                let (feats, dtrace) = dec.forward_traced(p, &skips)?;
                let (out, htrace) = head.forward_traced(p, &feats, self.factor)?;
                (Some(out), Some((dtrace, feats, htrace)))
            }
            None => (None, None),
        };
        let fim_trace = match (&self.fim, &sr_out) {
            (Some(f), Some(sr)) => Some(f.forward_traced(p, &probs, sr)?),
            _ => None,
        };
        Ok(TracedOutputs {
            logits,
            sr: sr_out,
            fim: fim_trace.as_ref().map(|t| t.output.clone()),
            trace: ForwardTrace {
                encoder,
                seg_decoder,
                seg_features,
                sr: sr_trace,
                fim: fim_trace,
            },
            probs,
        })
    }

    /// Back-propagates output gradients through the whole graph.
    /// `grad_probs` is w.r.t. the softmax probabilities.
    pub fn backward(
        &self,
        p: &ParamSet,
        out: &TracedOutputs,
        grad_probs: &FeatureMap,
        grad_sr: Option<&FeatureMap>,
        grad_fim: Option<&FeatureMap>,
    ) -> Result<ParamSet> {
        let mut grads = ParamSet::new();
        let t = &out.trace;
        let mut dprobs = grad_probs.clone();
        let mut dsr = grad_sr.cloned();

        if let (Some(fim), Some(ft), Some(gf)) = (&self.fim, &t.fim, grad_fim) {
            let (dseg, dsr_fim) = fim.backward(p, ft, gf, &mut grads)?;
            dprobs.add_assign(&dseg);
            match &mut dsr {
                Some(d) => d.add_assign(&dsr_fim),
                None => dsr = Some(dsr_fim),
            }
        }

        let dlogits = tensor::softmax_channels_backward(&out.probs, &dprobs);
        let dfeat = self.seg_head.backward(p, &t.seg_features, &dlogits, self.factor, &mut grads)?;
        let mut skip_grads = self.dec_seg.backward(p, &t.seg_decoder, dfeat, &mut grads)?;

        if let (Some((dec, head)), Some((dtrace, feats, htrace)), Some(dsr)) = (&self.dec_sr, &t.sr, dsr) {
            let dfeats = head.backward(p, htrace, &dsr, self.factor, &mut grads)?;
            debug_assert_eq!(dfeats.shape(), feats.shape());
            let sr_skips = dec.backward(p, dtrace, dfeats, &mut grads)?;
            for (a, b) in skip_grads.iter_mut().zip(&sr_skips) {
                a.add_assign(b);
            }
        }

        self.encoder.backward(p, &t.encoder, skip_grads, &mut grads)?;
        Ok(grads)
    }
}
