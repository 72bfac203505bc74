//! Overfits the full model on four synthetic 128x128 images and reports
//! train-set IoU and super-resolution MSE.
//!
//! cargo run --release -p supervessel --example overfit -- [epochs] [init_lr] [momentum]

use supervessel::data::{generate_synthetic, Dataset, SyntheticConfig};
use supervessel::engine::{evaluate_model, train_with, TrainConfig};
use supervessel::losses::mse;
use supervessel::model::{build_model, ModelConfig};

fn arg<T: std::str::FromStr>(args: &[String], i: usize, default: T) -> T {
    args.get(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> supervessel::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let samples = generate_synthetic(&SyntheticConfig { n_images: 4, ..Default::default() })?;
    let data = Dataset::from_samples("overfit", samples, 4);
    let model_cfg = ModelConfig {
        encoder_widths: vec![24, 48, 96, 192, 384],
        fim_dim: 12,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: arg(&args, 0, 300),
        init_lr: arg(&args, 1, 0.025),
        momentum: arg(&args, 2, 0.95),
        batch_size: 1,
        eval_every: 0,
        ..Default::default()
    };
    let out = train_with(build_model(&model_cfg, 0)?, &data, &cfg, |s| {
        if s.step % 100 == 0 {
            eprintln!("step {:>5}  lr {:.5}  total {:.4}  ({:.0}s)", s.step, s.lr, s.total, s.elapsed_s);
        }
    })?;
    let m = &out.final_model;
    let iou = evaluate_model(m, &data.train)?.aggregate.iou.mean;
    let mut sr_mse = 0.0;
    for s in &data.train {
        if let Some(sr) = m.forward_train(&s.lr_image)?.o_sr {
            sr_mse += mse(&sr, &s.hr_image)? / data.train.len() as f64;
        }
    }
    println!(
        "{} epochs: train IoU {iou:.2}%, SR MSE {sr_mse:.5}, {:.0}s",
        cfg.epochs, out.log.wall_clock_s
    );
    Ok(())
}
