//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero when any fails.
//!
//! `cargo test -p supervessel --test acceptance [-- <name filter>...]`

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use supervessel::data::templates;
use supervessel::data::{default_train_count, generate_synthetic, Dataset, Split, SyntheticConfig};
use supervessel::engine::{evaluate_model, poly_lr, run_ablation, train, Sgd, TrainConfig};
use supervessel::losses::{fim_loss, fim_loss_grad, mse, seg_loss, seg_loss_grad, sr_loss, sr_loss_grad, LossConfig};
use supervessel::metrics::{evaluate_image, THRESHOLD};
use supervessel::model::{build_model, Branches, Conv2d, ModelConfig, ModelHandle, ParamSet, Phase, Tensor};
use supervessel::tensor::{channel_shuffle, channel_shuffle_permutation, FeatureMap};

// Tolerances and budgets.
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 20;
const AUC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: u64 = 200;
const OVERFIT_MIN_IOU: f64 = 0.80;
const OVERFIT_MAX_SR_MSE: f64 = 0.01;
const OVERFIT_MAX_EPOCHS: usize = 300;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const FAST_BUDGET: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(budget: Duration, t0: Instant) -> Result<(), String> {
    let el = t0.elapsed();
    ensure(el <= budget, || format!("took {:.1}s, budget {:.0}s", el.as_secs_f64(), budget.as_secs_f64()))
}

fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> FeatureMap {
    FeatureMap::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn random_onehot(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    let [b, c, h, w] = shape;
    let labels: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..c)).collect();
    FeatureMap::from_fn(shape, |bi, ci, y, x| (labels[(bi * h + y) * w + x] == ci) as u8 as f64)
}

/// Central differences of `f` at every entry of `x`.
fn numeric_grad(x: &FeatureMap, f: impl Fn(&FeatureMap) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = v - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` in the Euclidean norm.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn loss_gradients() -> Outcome {
    let t0 = Instant::now();
    let shape = [1, 2, 8, 8];
    // An 8x8 image cannot hold the default 11-tap SSIM window.
    let small = LossConfig { ssim_window: 7, ..LossConfig::default() };
    let mut worst = 0.0f64;
    let mut check = |what: &str, seed: u64, e: f64| -> Result<(), String> {
        worst = worst.max(e);
        ensure(e < FD_REL_TOL, || format!("{what} seed {seed}: relative error {e:.3e}"))
    };
    for seed in 0..FD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_onehot(&mut rng, shape);
        let probs = random_map(&mut rng, shape, 0.05, 0.95);
        let (_, g) = seg_loss_grad(&probs, &gt, small.eps).map_err(|e| e.to_string())?;
        let n = numeric_grad(&probs, |p| seg_loss(p, &gt, small.eps).unwrap());
        check("L_Seg", seed, rel_err(g.data(), &n))?;

        let sr = random_map(&mut rng, shape, 0.0, 1.0);
        let hr = random_map(&mut rng, shape, 0.0, 1.0);
        for (term, alpha) in [("L_SR mse", 1.0), ("L_SR ssim", 0.0), ("L_SR", 0.5)] {
            let cfg = LossConfig { alpha, ..small.clone() };
            let (_, g) = sr_loss_grad(&sr, &hr, &cfg).map_err(|e| e.to_string())?;
            let n = numeric_grad(&sr, |s| sr_loss(s, &hr, &cfg).unwrap());
            check(term, seed, rel_err(g.data(), &n))?;
        }

        // Keep seg * fim + seg strictly inside the clamp range.
        let s = random_map(&mut rng, shape, 0.05, 0.45);
        let f = random_map(&mut rng, shape, 0.05, 0.95);
        let (_, ds, df) = fim_loss_grad(&s, &f, &gt, small.eps).map_err(|e| e.to_string())?;
        let ns = numeric_grad(&s, |s| fim_loss(s, &f, &gt, small.eps).unwrap());
        let nf = numeric_grad(&f, |f| fim_loss(&s, f, &gt, small.eps).unwrap());
        check("L_FIM d/dseg", seed, rel_err(ds.data(), &ns))?;
        check("L_FIM d/dfim", seed, rel_err(df.data(), &nf))?;
    }
    // The default window on an image large enough to hold it.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let big = [1, 2, 16, 16];
    let sr = random_map(&mut rng, big, 0.0, 1.0);
    let hr = random_map(&mut rng, big, 0.0, 1.0);
    let cfg = LossConfig::default();
    let (_, g) = sr_loss_grad(&sr, &hr, &cfg).map_err(|e| e.to_string())?;
    let n = numeric_grad(&sr, |s| sr_loss(s, &hr, &cfg).unwrap());
    check("L_SR window 11", 99, rel_err(g.data(), &n))?;
    within(FAST_BUDGET, t0)?;
    Ok(format!(
        "{FD_SEEDS} seeds, worst relative error {worst:.2e} < {FD_REL_TOL:e}, {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn brute_auc(scores: &[f64], gt: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(gt).filter(|(_, &g)| g == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(gt).filter(|(_, &g)| g == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut with_auc = 0;
    for seed in 0..METRIC_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let density = rng.random_range(0.0..0.5);
        let gt: Vec<u8> = (0..256).map(|_| rng.random_bool(density) as u8).collect();
        // Every other instance is quantised to force ties in the ranking.
        let coarse = seed % 2 == 0;
        let scores: Vec<f64> = (0..256)
            .map(|_| {
                let v: f64 = rng.random();
                if coarse {
                    (v * 10.0).floor() / 10.0
                } else {
                    v
                }
            })
            .collect();
        let m = evaluate_image(&scores, &gt).map_err(|e| e.to_string())?;
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&s, &g) in scores.iter().zip(&gt) {
            match (s >= THRESHOLD, g == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let expect = [
            ("P", m.p, div(tp, tp + fp)),
            ("SE", m.se, div(tp, tp + fn_)),
            ("IoU", m.iou, div(tp, tp + fp + fn_)),
            ("Dice", m.dice, div(2 * tp, 2 * tp + fp + fn_)),
            ("ACC", m.acc, div(tp + tn, 256)),
        ];
        for (name, got, want) in expect {
            ensure(got == want, || format!("instance {seed}: {name} {got} != {want}"))?;
        }
        match (m.auc, brute_auc(&scores, &gt)) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                with_auc += 1;
                ensure((a - b).abs() <= AUC_TOL, || format!("instance {seed}: AUC {a} vs {b}"))?;
            }
            (a, b) => return Err(format!("instance {seed}: AUC {a:?} vs {b:?}")),
        }
    }
    within(FAST_BUDGET, t0)?;
    Ok(format!(
        "{METRIC_INSTANCES} instances exact, AUC within {AUC_TOL:e} on {with_auc}, {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn tiny_model(branches: Branches) -> ModelConfig {
    ModelConfig {
        encoder_widths: vec![4, 8],
        fim_dim: 6,
        branches,
        ..ModelConfig::default()
    }
}

fn synthetic(n: usize, size: usize, seed: u64) -> Vec<supervessel::data::SamplePair> {
    generate_synthetic(&SyntheticConfig {
        n_images: n,
        hr_size: [size, size],
        seed,
        ..SyntheticConfig::default()
    })
    .expect("synthetic data")
}

fn schedule_and_optimizer() -> Outcome {
    // 3 images, batch 2: two steps per epoch, the second one short.
    let data = Dataset::from_samples("sched", synthetic(3, 16, 3), 3);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        init_lr: 0.02,
        power: 0.9,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let out = train(build_model(&tiny_model(Branches::FULL), 0).unwrap(), &data, &cfg).map_err(|e| e.to_string())?;
    let max_iter = 6;
    ensure(out.log.steps.len() == max_iter, || format!("{} steps logged", out.log.steps.len()))?;
    for (t, rec) in out.log.steps.iter().enumerate() {
        let want = (1.0 - t as f64 / max_iter as f64).powf(cfg.power) * cfg.init_lr;
        ensure(rec.step == t && rec.lr.to_bits() == want.to_bits(), || {
            format!("step {t}: logged lr {:e}, expected {want:e}", rec.lr)
        })?;
        ensure(rec.lr.to_bits() == poly_lr(t, max_iter, cfg.init_lr, cfg.power).unwrap().to_bits(), || {
            format!("step {t}: poly_lr disagrees")
        })?;
    }

    // Two-parameter toy: decayed weight w, undecayed bias b, constant
    // gradients (0.2, -0.1), lr 0.1, momentum 0.9, weight decay 0.01.
    //   v_w = 0.2 + 0.01 * 1.0 = 0.21            w = 1.0 - 0.021 = 0.979
    //   v_b = -0.1                               b = 0.5 + 0.01  = 0.51
    //   v_w = 0.9 * 0.21 + 0.2 + 0.01 * 0.979    w = 0.979 - 0.039879 = 0.939121
    //   v_b = 0.9 * -0.1 - 0.1 = -0.19           b = 0.51 + 0.019 = 0.529
    let mut params = ParamSet::new();
    params.insert("toy.weight", Tensor { shape: vec![1], data: vec![1.0] });
    params.insert("toy.bias", Tensor { shape: vec![1], data: vec![0.5] });
    let mut grads = ParamSet::new();
    grads.insert("toy.weight", Tensor { shape: vec![1], data: vec![0.2] });
    grads.insert("toy.bias", Tensor { shape: vec![1], data: vec![-0.1] });
    let (lr, m, wd) = (0.1, 0.9, 0.01);
    let mut sgd = Sgd::new(m, wd);
    let (mut w, mut b, mut vw, mut vb) = (1.0f64, 0.5f64, 0.0f64, 0.0f64);
    let hand = [(0.979, 0.51), (0.939121, 0.529)];
    for (k, (hw, hb)) in hand.into_iter().enumerate() {
        sgd.step(&mut params, &grads, lr).map_err(|e| e.to_string())?;
        vw = m * vw + 0.2 + wd * w;
        w -= lr * vw;
        vb = m * vb + -0.1;
        b -= lr * vb;
        let gw = params.get("toy.weight").unwrap().data[0];
        let gb = params.get("toy.bias").unwrap().data[0];
        ensure(gw.to_bits() == w.to_bits() && gb.to_bits() == b.to_bits(), || {
            format!("step {k}: optimizer ({gw}, {gb}) vs formula ({w}, {b})")
        })?;
        ensure((gw - hw).abs() < 1e-15 && (gb - hb).abs() < 1e-15, || {
            format!("step {k}: optimizer ({gw}, {gb}) vs hand ({hw}, {hb})")
        })?;
    }
    Ok(format!("{max_iter} logged lrs bit-exact; two SGD updates exact"))
}

/// Independent count of the train-only layers (super-resolution decoder and
/// interaction module) from the layer shapes.
fn hand_train_only(cfg: &ModelConfig) -> usize {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let w = &cfg.encoder_widths;
    let decoder: usize = (0..w.len() - 1)
        .map(|i| conv(3, w[i + 1] + w[i], w[i]) + conv(3, w[i], w[i]))
        .sum();
    let sr = decoder + conv(3, w[0], w[0]) + conv(1, w[0], cfg.sr_out_channels);
    let d = cfg.fim_dim;
    let fim = conv(1, cfg.n_classes + cfg.sr_out_channels, d)
        + 3 * conv(3, d / 3, d / 3)
        + 2 * conv(1, d, d)
        + conv(1, d, cfg.n_classes);
    sr + fim
}

fn test_phase_equivalence() -> Outcome {
    let cfg = ModelConfig {
        encoder_widths: vec![8, 16, 32],
        fim_dim: 12,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_map(&mut rng, [2, 3, 32, 32], 0.0, 1.0);
    let train_out = model.forward_train(&x).map_err(|e| e.to_string())?;
    let stripped = model.strip_for_test();
    let test_out = model.forward_test(&x).map_err(|e| e.to_string())?;
    let stripped_out = stripped.forward_test(&x).map_err(|e| e.to_string())?;
    let bits = |m: &FeatureMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&train_out.o_seg_probs) == bits(&test_out), || "forward_test differs from forward_train".into())?;
    ensure(bits(&test_out) == bits(&stripped_out), || "stripped model output differs".into())?;

    let full = model.params.numel();
    let test = stripped.params.numel();
    let delta = hand_train_only(&cfg);
    ensure(test < full, || format!("stripped {test} not smaller than {full}"))?;
    ensure(full - test == delta, || format!("delta {} != hand sum {delta}", full - test))?;
    ensure(stripped.count_parameters(Phase::Test) == Some(test), || "test count mismatch".into())?;

    let dflt = ModelConfig::default();
    let d_full = ModelHandle::expected_parameters(&dflt, Phase::Train);
    let d_test = ModelHandle::expected_parameters(&dflt, Phase::Test);
    ensure(d_full - d_test == hand_train_only(&dflt), || "default config delta mismatch".into())?;
    Ok(format!(
        "bitwise equal; {full} -> {test} parameters (delta {delta}); default config {d_full} -> {d_test}"
    ))
}

fn overfit_model() -> ModelConfig {
    ModelConfig {
        encoder_widths: vec![24, 48, 96, 192, 384],
        fim_dim: 12,
        ..ModelConfig::default()
    }
}

fn overfit_train() -> TrainConfig {
    TrainConfig {
        epochs: OVERFIT_MAX_EPOCHS,
        batch_size: 1,
        init_lr: 0.025,
        momentum: 0.95,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn desk_overfit() -> Outcome {
    let t0 = Instant::now();
    let data = Dataset::from_samples("overfit", synthetic(4, 128, 0), 4);
    ensure(data.train[0].lr_image.height() == 64, || "LR input is not 64x64".into())?;
    let cfg = overfit_train();
    let out = train(build_model(&overfit_model(), 0).unwrap(), &data, &cfg).map_err(|e| e.to_string())?;
    let m = &out.final_model;
    let iou = evaluate_model(m, &data.train).map_err(|e| e.to_string())?.aggregate.iou.mean / 100.0;
    let mut sr_mse = 0.0;
    for s in &data.train {
        let sr = m.forward_train(&s.lr_image).map_err(|e| e.to_string())?.o_sr.ok_or("no SR output")?;
        sr_mse += mse(&sr, &s.hr_image).map_err(|e| e.to_string())? / data.train.len() as f64;
    }
    let secs = t0.elapsed().as_secs_f64();
    let summary = format!("{} epochs: train IoU {iou:.4}, SR MSE {sr_mse:.5}, {secs:.0}s", cfg.epochs);
    ensure(iou >= OVERFIT_MIN_IOU, || format!("{summary}; IoU below {OVERFIT_MIN_IOU}"))?;
    ensure(sr_mse <= OVERFIT_MAX_SR_MSE, || format!("{summary}; SR MSE above {OVERFIT_MAX_SR_MSE}"))?;
    within(OVERFIT_BUDGET, t0).map_err(|e| format!("{summary}; {e}"))?;
    Ok(summary)
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn ablation_direction() -> Outcome {
    let samples = synthetic(16, 64, 7);
    let n_train = default_train_count(samples.len());
    let data = Dataset::from_samples("ablation", samples, n_train);
    let model = ModelConfig {
        encoder_widths: vec![8, 16, 32],
        fim_dim: 12,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 100,
        batch_size: 2,
        init_lr: 0.03,
        ..TrainConfig::default()
    };
    let table = run_ablation(&data, &model, &cfg, &ABLATION_SEEDS).map_err(|e| e.to_string())?;
    let full = table.row(Branches::FULL).ok_or("no full row")?.iou_per_seed();
    let asr = table.row(Branches::ASR).ok_or("no ASR row")?.iou_per_seed();
    let (mf, ma) = (median(&full), median(&asr));
    let detail = format!("median test IoU full {mf:.2}% vs ASR-only {ma:.2}% (per seed {full:.2?} vs {asr:.2?})");
    ensure(mf >= ma, || detail.clone())?;
    Ok(detail)
}

fn fim_structure() -> Outcome {
    let t0 = Instant::now();
    let cfg = tiny_model(Branches::FULL);
    let model = build_model(&cfg, 11).unwrap();
    let g = cfg.fim_dim / 3;

    // Impulse footprints of the dilated branches, biases removed.
    let size = 17;
    let c = size / 2;
    for d in [1usize, 2, 4] {
        let conv = Conv2d::new(format!("fim.dil{d}"), g, g, 3).dilated(d);
        let mut params = model.params.clone();
        let weight = params.get(&conv.weight_name()).map_err(|e| e.to_string())?;
        ensure(weight.shape == vec![g, g, 3, 3], || format!("fim.dil{d} weight shape {:?}", weight.shape))?;
        params.get_mut(&conv.bias_name()).unwrap().data.fill(0.0);
        let mut x = FeatureMap::zeros([1, g, size, size]);
        x.set(0, 0, c, c, 1.0);
        let y = conv.forward(&params, &x).map_err(|e| e.to_string())?;
        let offsets = [c - d, c, c + d];
        for o in 0..g {
            for yy in 0..size {
                for xx in 0..size {
                    let expected = offsets.contains(&yy) && offsets.contains(&xx);
                    let v = y.get(0, o, yy, xx);
                    ensure((v != 0.0) == expected, || {
                        format!("dilation {d}: output ({o}, {yy}, {xx}) = {v}")
                    })?;
                }
            }
        }
    }

    // Channel shuffle against reshape [groups, C/groups] -> transpose -> flatten.
    for (channels, groups) in [(6usize, 3usize), (12, 3), (48, 3)] {
        let per = channels / groups;
        let oracle: Vec<usize> = (0..per).flat_map(|j| (0..groups).map(move |i| i * per + j)).collect();
        let perm = channel_shuffle_permutation(channels, groups).map_err(|e| e.to_string())?;
        ensure(perm == oracle, || format!("permutation {perm:?} != {oracle:?}"))?;
        let x = FeatureMap::from_fn([1, channels, 2, 2], |_, ch, y, xx| (ch * 4 + y * 2 + xx) as f64);
        let s = channel_shuffle(&x, groups).map_err(|e| e.to_string())?;
        for (out_c, &in_c) in oracle.iter().enumerate() {
            ensure(s.plane(0, out_c) == x.plane(0, in_c), || format!("shuffled channel {out_c}"))?;
        }
    }

    // Sigmoid range, including saturating inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for scale in [1.0, 1e3] {
        let probs = random_map(&mut rng, [1, 2, 16, 16], 0.0, scale);
        let sr = random_map(&mut rng, [1, 3, 16, 16], -scale, scale);
        let f = model.fim(&probs, &sr).map_err(|e| e.to_string())?;
        ensure(f.data().iter().all(|v| (0.0..=1.0).contains(v)), || format!("FIM output outside [0, 1] at scale {scale}"))?;
        if scale == 1.0 {
            ensure(f.data().iter().all(|&v| v > 0.0 && v < 1.0), || "FIM output not strictly inside (0, 1)".into())?;
        }
    }

    // A zero interaction map leaves the segmentation loss unchanged.
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let gt = random_onehot(&mut rng, [2, 2, 8, 8]);
        let probs = random_map(&mut rng, [2, 2, 8, 8], 0.0, 1.0);
        let zero = FeatureMap::zeros(probs.shape());
        let eps = LossConfig::default().eps;
        let a = fim_loss(&probs, &zero, &gt, eps).map_err(|e| e.to_string())?;
        let b = seg_loss(&probs, &gt, eps).map_err(|e| e.to_string())?;
        ensure(a.to_bits() == b.to_bits(), || format!("L_FIM {a} != L_Seg {b}"))?;
    }
    within(FAST_BUDGET, t0)?;
    Ok(format!("footprints, shuffle, range and zero-map identity exact, {:.2}s", t0.elapsed().as_secs_f64()))
}

fn pipeline_fidelity() -> Outcome {
    let cases = [
        ("hrf", templates::hrf(), (30, 15), [584, 876], [1162, 1752]),
        ("octa6m", templates::octa_6m(), (240, 60), [200, 200], [400, 400]),
        ("prime_fp20", templates::prime_fp20(), (10, 5), [648, 704], [1296, 1408]),
    ];
    let mut parts = Vec::new();
    for (name, manifest, (train_n, test_n), lr, hr) in cases {
        let m = manifest.map_err(|e| format!("{name}: {e}"))?;
        let counts = (m.count(Split::Train), m.count(Split::Test));
        ensure(counts == (train_n, test_n), || format!("{name}: split {counts:?}"))?;
        ensure(m.lr_size() == lr && m.hr_size == hr, || {
            format!("{name}: {:?} -> {:?}", m.lr_size(), m.hr_size)
        })?;
        parts.push(format!("{name} {train_n}/{test_n} {}x{}->{}x{}", lr[1], lr[0], hr[1], hr[0]));
    }
    Ok(parts.join("; "))
}

fn main() {
    let criteria: [(&str, Criterion); 8] = [
        ("1 loss gradients", loss_gradients),
        ("2 metric oracle", metric_oracle),
        ("3 schedule and optimizer", schedule_and_optimizer),
        ("4 test-phase equivalence", test_phase_equivalence),
        ("5 desk-scale overfit", desk_overfit),
        ("6 ablation direction", ablation_direction),
        ("7 interaction module structure", fim_structure),
        ("8 pipeline fidelity", pipeline_fidelity),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
