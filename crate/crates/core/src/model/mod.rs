//! The dual-stream segmentation network: a shared U-Net encoder feeding a
//! segmentation decoder with a feature-decomposition upsampling head, an
//! auxiliary super-resolution decoder, and a feature interaction module
//! that couples the two at high resolution.
//!
//! Only the encoder, the segmentation decoder and its head are needed at
//! test time; [`ModelHandle::strip_for_test`] drops everything else.

mod conv;
mod network;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use conv::Conv2d;
pub use params::{ParamSet, Tensor};

pub(crate) use network::{Network, TracedOutputs};

use crate::error::{shape_err, Error, Result};
use crate::tensor::FeatureMap;

/// Which optional parts of the network exist. Mirrors the ablation rows:
/// baseline, +super-resolution, +feature decomposition, +interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Branches {
    pub asr: bool,
    pub ufd: bool,
    pub fim: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self::FULL
    }
}

impl Branches {
    pub const BASELINE: Self = Self { asr: false, ufd: false, fim: false };
    pub const ASR: Self = Self { asr: true, ufd: false, fim: false };
    pub const ASR_UFD: Self = Self { asr: true, ufd: true, fim: false };
    pub const FULL: Self = Self { asr: true, ufd: true, fim: true };

    /// The four ablation rows in table order.
    pub const ROWS: [Self; 4] = [Self::BASELINE, Self::ASR, Self::ASR_UFD, Self::FULL];

    pub fn validate(&self) -> Result<()> {
        if self.fim && !self.ufd {
            return Err(Error::Config("fim requires ufd".into()));
        }
        if self.ufd && !self.asr {
            return Err(Error::Config("ufd requires asr".into()));
        }
        Ok(())
    }

    /// Applies `k=v[,k=v]` overrides such as `fim=off,asr=on`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<()> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("ablation override `{item}` is not k=v")))?;
            let on = match value.trim() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                other => return Err(Error::Config(format!("ablation value `{other}` is not on/off"))),
            };
            match key.trim() {
                "asr" => self.asr = on,
                "ufd" => self.ufd = on,
                "fim" => self.fim = on,
                other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match (self.asr, self.ufd, self.fim) {
            (false, false, false) => "baseline",
            (true, false, false) => "asr",
            (true, true, false) => "asr+ufd",
            (true, true, true) => "asr+ufd+fim",
            _ => "invalid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub upscale_factor: usize,
    pub fim_dim: usize,
    pub sr_out_channels: usize,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            n_classes: 2,
            encoder_widths: vec![64, 128, 256, 512, 1024],
            upscale_factor: 2,
            fim_dim: 48,
            sr_out_channels: 3,
            branches: Branches::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return fail("in_channels must be >= 1".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return fail(format!("encoder_widths must be non-empty and positive, got {:?}", self.encoder_widths));
        }
        if self.upscale_factor < 2 || !self.upscale_factor.is_power_of_two() {
            return fail(format!("upscale_factor must be a power of two >= 2, got {}", self.upscale_factor));
        }
        if self.fim_dim == 0 || !self.fim_dim.is_multiple_of(3) {
            return fail(format!("fim_dim must be a positive multiple of 3, got {}", self.fim_dim));
        }
        if self.sr_out_channels != self.in_channels {
            return fail(format!(
                "sr_out_channels ({}) must equal in_channels ({})",
                self.sr_out_channels, self.in_channels
            ));
        }
        self.branches.validate()?;
        if !self.branches.ufd && self.n_classes != 2 {
            return fail("a single-logit head (ufd off) only supports n_classes = 2".into());
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        1 << (self.encoder_widths.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// Parameter-name prefixes evaluated at test time.
pub const TEST_PREFIXES: [&str; 4] = ["encoder.", "dec_seg.", "ufd.", "seg_head."];
/// Parameter-name prefixes that only exist for training.
pub const TRAIN_ONLY_PREFIXES: [&str; 2] = ["dec_sr.", "fim."];

#[derive(Clone, Debug, PartialEq)]
pub struct SuperVesselOutputs {
    pub o_seg_logits: FeatureMap,
    pub o_seg_probs: FeatureMap,
    /// Absent when the super-resolution branch is disabled.
    pub o_sr: Option<FeatureMap>,
    /// Absent when the interaction module is disabled.
    pub o_fim: Option<FeatureMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    pub config: ModelConfig,
    pub phase: Phase,
    pub params: ParamSet,
}

/// Builds a train-phase model with He-initialised kernels and zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelHandle> {
    config.validate()?;
    let net = Network::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for conv in net.test_convs().into_iter().chain(net.train_only_convs()) {
        conv.init(&mut params, &mut rng);
    }
    Ok(ModelHandle {
        config: config.clone(),
        phase: Phase::Train,
        params,
    })
}

impl ModelHandle {
    pub(crate) fn network(&self) -> Network {
        Network::new(&self.config)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.config.in_channels {
            return Err(shape_err(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.input_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(shape_err(format!(
                "input extents {h}x{w} must be multiples of {m}"
            )));
        }
        Ok(())
    }

    fn require_train_branches(&self) -> Result<()> {
        if self.phase == Phase::Test {
            return Err(Error::MissingBranch("super-resolution/interaction"));
        }
        Ok(())
    }

    /// All outputs of the training graph.
    pub fn forward_train(&self, x: &FeatureMap) -> Result<SuperVesselOutputs> {
        let t = self.forward_traced(x)?;
        Ok(SuperVesselOutputs {
            o_seg_logits: t.logits,
            o_seg_probs: t.probs,
            o_sr: t.sr,
            o_fim: t.fim,
        })
    }

    pub(crate) fn forward_traced(&self, x: &FeatureMap) -> Result<TracedOutputs> {
        self.require_train_branches()?;
        self.check_input(x)?;
        self.network().forward_traced(&self.params, x)
    }

    /// Segmentation probabilities only; evaluates encoder, segmentation
    /// decoder and head.
    pub fn forward_test(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let net = self.network();
        let skips = net.encoder.forward(&self.params, x)?;
        Ok(net.segment(&self.params, &skips)?.1)
    }

    /// Test-phase forward on arbitrary extents: replicate-pads the input to
    /// the encoder multiple and crops the output back to `factor * input`.
    pub fn predict_probs(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let [_, _, h, w] = x.shape();
        let m = self.config.input_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let n = self.config.upscale_factor;
        if (ph, pw) == (h, w) {
            return self.forward_test(x);
        }
        self.forward_test(&x.pad_to(ph, pw)?)?.crop_to(h * n, w * n)
    }

    /// Drops the super-resolution decoder and the interaction module.
    pub fn strip_for_test(&self) -> ModelHandle {
        let mut params = self.params.clone();
        params.retain(|name| !TRAIN_ONLY_PREFIXES.iter().any(|p| name.starts_with(p)));
        ModelHandle {
            config: self.config.clone(),
            phase: Phase::Test,
            params,
        }
    }

    /// Scalar parameter count of the subgraph active in `phase`. `None` when
    /// asking for the train count of a stripped handle.
    pub fn count_parameters(&self, phase: Phase) -> Option<usize> {
        match phase {
            Phase::Test => Some(
                TEST_PREFIXES
                    .iter()
                    .map(|p| self.params.numel_with_prefix(p))
                    .sum(),
            ),
            Phase::Train if self.phase == Phase::Test => None,
            Phase::Train => Some(self.params.numel()),
        }
    }

    /// Parameter count implied by the configuration alone.
    pub fn expected_parameters(config: &ModelConfig, phase: Phase) -> usize {
        let net = Network::new(config);
        let test: usize = net.test_convs().iter().map(|c| c.param_count()).sum();
        match phase {
            Phase::Test => test,
            Phase::Train => test + net.train_only_convs().iter().map(|c| c.param_count()).sum::<usize>(),
        }
    }

    /// Output of the interaction module for given branch outputs.
    pub fn fim(&self, seg_probs: &FeatureMap, sr: &FeatureMap) -> Result<FeatureMap> {
        self.require_train_branches()?;
        let net = self.network();
        let f = net.fim.as_ref().ok_or(Error::MissingBranch("fim"))?;
        f.forward(&self.params, seg_probs, sr)
    }

    /// Feature-decomposition head applied to decoder features at input
    /// resolution.
    pub fn ufd(&self, seg_features: &FeatureMap) -> Result<FeatureMap> {
        if !self.config.branches.ufd {
            return Err(Error::MissingBranch("ufd"));
        }
        let net = self.network();
        net.seg_head.forward(&self.params, seg_features, self.config.upscale_factor)
    }
}
