//! Training (SGD with momentum and weight decay under a poly learning-rate
//! schedule), evaluation, ablation runs and run-directory output.

mod ablation;
mod eval;
mod rundir;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation, AblationRow, AblationTable, ABLATION_CSV_HEADER};
pub use eval::{evaluate, evaluate_model, predict_hr, Predictor};
pub use rundir::{write_run_dir, RunConfig, RunFiles};

use crate::data::{to_onehot, Dataset, SamplePair, Split};
use crate::error::{shape_err, Error, Result};
use crate::losses::{self, LossConfig, LossReport};
use crate::metrics::MetricsReport;
use crate::model::{Branches, ModelConfig, ModelHandle, ParamSet, Phase};
use crate::tensor::FeatureMap;

/// Set to `1` to request deterministic kernels. Every kernel in this crate
/// is already deterministic; the flag is recorded in the run log.
pub const DETERMINISTIC_ENV: &str = "SUPERVESSEL_DETERMINISTIC";

pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both the weight initialisation and the shuffling.
    pub seed: u64,
    pub ablation: Branches,
    pub loss: LossConfig,
    /// Validate every this many epochs (the last epoch always validates).
    /// 0 disables validation; the best checkpoint is then the final one.
    pub eval_every: usize,
    /// Split the best checkpoint is selected on.
    pub select_on: Split,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 128,
            batch_size: 2,
            seed: 0,
            ablation: Branches::FULL,
            loss: LossConfig::default(),
            eval_every: 1,
            select_on: Split::Test,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(Error::Config(format!("init_lr must be positive, got {}", self.init_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.power < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1); weight_decay and power >= 0".into()));
        }
        self.ablation.validate()?;
        self.loss.validate()
    }

    /// `base` with the branch flags replaced by this run's ablation flags.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            branches: self.ablation,
            ..base.clone()
        }
    }
}

/// `init_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, init_lr: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Range("max_iter must be positive".into()));
    }
    if iter > max_iter {
        return Err(Error::Range(format!("iter {iter} exceeds max_iter {max_iter}")));
    }
    Ok((1.0 - iter as f64 / max_iter as f64).powf(power) * init_lr)
}

/// SGD with heavy-ball momentum and L2 weight decay on conv weights:
/// `v = m * v + g + wd * theta`, then `theta -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamSet,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: ParamSet::new(),
        }
    }

    fn decays(name: &str) -> bool {
        name.ends_with(".weight")
    }

    /// Parameters without an entry in `grads` are treated as having zero
    /// gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        for (name, theta) in params.iter_mut() {
            let wd = if Self::decays(name) { self.weight_decay } else { 0.0 };
            let g = grads.get(name).ok();
            if let Some(g) = g {
                if g.shape != theta.shape {
                    return Err(shape_err(format!("gradient for `{name}` has shape {:?}", g.shape)));
                }
            }
            let v = self.velocity.entry_zeros(name, &theta.shape);
            for (i, (t, v)) in theta.data.iter_mut().zip(v.data.iter_mut()).enumerate() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                *v = self.momentum * *v + gi + wd * *t;
                *t -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_seg: f64,
    /// Absent when the super-resolution branch is off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_sr: Option<f64>,
    /// Absent when the interaction module is off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_fim: Option<f64>,
    pub total: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub metrics: MetricsReport,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<EpochRecord>,
    pub deterministic: bool,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the highest validation IoU.
    pub best: ModelHandle,
    pub best_epoch: usize,
    pub final_model: ModelHandle,
    pub log: RunLog,
}

/// Losses and parameter gradients for one batch.
pub fn loss_and_grads(model: &ModelHandle, batch: &[&SamplePair], loss: &LossConfig) -> Result<(LossReport, ParamSet)> {
    let cfg = &model.config;
    let b = cfg.branches;
    let lr = FeatureMap::stack(&batch.iter().map(|s| &s.lr_image).collect::<Vec<_>>())?;
    let hr = FeatureMap::stack(&batch.iter().map(|s| &s.hr_image).collect::<Vec<_>>())?;
    let onehots = batch
        .iter()
        .map(|s| to_onehot(&s.hr_mask, cfg.n_classes))
        .collect::<Result<Vec<_>>>()?;
    let target = FeatureMap::stack(&onehots.iter().collect::<Vec<_>>())?;

    let [_, _, h, w] = lr.shape();
    let m = cfg.input_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let input = if (ph, pw) == (h, w) { lr } else { lr.pad_to(ph, pw)? };
    let out = model.forward_traced(&input)?;
    let (oh, ow) = (out.probs.height(), out.probs.width());
    let (th, tw) = (target.height(), target.width());
    if th > oh || tw > ow {
        return Err(shape_err(format!(
            "target {th}x{tw} exceeds network output {oh}x{ow}"
        )));
    }
    let fit = |x: &FeatureMap| if (oh, ow) == (th, tw) { Ok(x.clone()) } else { x.crop_to(th, tw) };
    let probs = fit(&out.probs)?;

    let (l_seg, mut dprobs) = losses::seg_loss_grad(&probs, &target, loss.eps)?;
    let mut l_sr = 0.0;
    let mut dsr = None;
    if b.asr {
        let sr = fit(out.sr.as_ref().ok_or(Error::MissingBranch("sr"))?)?;
        let (v, g) = losses::sr_loss_grad(&sr, &hr, loss)?;
        l_sr = v;
        dsr = Some(g.uncrop(oh, ow));
    }
    let mut l_fim = 0.0;
    let mut dfim = None;
    if b.fim {
        let f = fit(out.fim.as_ref().ok_or(Error::MissingBranch("fim"))?)?;
        let (v, dp, df) = losses::fim_loss_grad(&probs, &f, &target, loss.eps)?;
        l_fim = v;
        dprobs.add_assign(&dp);
        dfim = Some(df.uncrop(oh, ow));
    }
    let report = losses::total_loss(l_seg, l_sr, l_fim)?;
    let grads = model
        .network()
        .backward(&model.params, &out, &dprobs.uncrop(oh, ow), dsr.as_ref(), dfim.as_ref())?;
    if grads.iter().any(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric { term: "gradient" });
    }
    Ok((report, grads))
}

/// Trains `model` on `data.train`. The model's branch flags must equal
/// `cfg.ablation`.
pub fn train(model: ModelHandle, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_| {})
}

/// Like [`train`], calling `on_step` after every optimiser step.
pub fn train_with(
    mut model: ModelHandle,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.phase != Phase::Train {
        return Err(Error::MissingBranch("train-phase parameters"));
    }
    if model.config.branches != cfg.ablation {
        return Err(Error::Config(format!(
            "model branches `{}` differ from ablation flags `{}`",
            model.config.branches.label(),
            cfg.ablation.label()
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for s in data.train.iter().chain(&data.test) {
        if s.lr_image.channels() != model.config.in_channels {
            return Err(Error::Config(format!(
                "data has {} channels, model expects {}",
                s.lr_image.channels(),
                model.config.in_channels
            )));
        }
    }
    let val_split = if data.split(cfg.select_on).is_empty() { Split::Train } else { cfg.select_on };

    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = RunLog {
        deterministic: deterministic_requested(),
        ..Default::default()
    };
    let start = Instant::now();
    let mut best: Option<(f64, usize, ModelHandle)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SamplePair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let lr = poly_lr(step, max_iter, cfg.init_lr, cfg.power)?;
            let (report, grads) = match loss_and_grads(&model, &batch, &cfg.loss) {
                Ok(r) => r,
                Err(Error::Numeric { term }) => {
                    return Err(Error::Diverged {
                        step,
                        term,
                        last_good: Box::new(model),
                    })
                }
                Err(e) => return Err(e),
            };
            sgd.step(&mut model.params, &grads, lr)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                l_seg: report.l_seg,
                l_sr: cfg.ablation.asr.then_some(report.l_sr),
                l_fim: cfg.ablation.fim.then_some(report.l_fim),
                total: report.total,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            on_step(&rec);
            log.steps.push(rec);
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let metrics = evaluate_model(&model, data.split(val_split))?;
            let iou = metrics.aggregate.iou.mean;
            if best.as_ref().is_none_or(|(b, _, _)| iou > *b) {
                best = Some((iou, epoch, model.clone()));
            }
            log.validation.push(EpochRecord {
                epoch,
                split: val_split,
                metrics,
                elapsed_s: start.elapsed().as_secs_f64(),
            });
        }
    }
    log.wall_clock_s = start.elapsed().as_secs_f64();
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (cfg.epochs - 1, model.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        final_model: model,
        log,
    })
}
