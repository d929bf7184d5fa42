//! Trains on a synthetic texture set and compares frozen features before and
//! after training.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- setting=geometric epochs=5
//! ```
//!
//! Arguments are `key=value` training overrides, plus `images=N`,
//! `image_size=S` and `test_images=N` for the generated data.

use std::time::Instant;

use glsd::data::{synthesize, SynthConfig};
use glsd::eval::{correspondence_eval, knn_eval, EmbeddingBank, KnnOptions};
use glsd::trainer::{init_state, train_with, TrainConfig};

fn main() -> glsd::Result<()> {
    let mut config = TrainConfig::default();
    for kv in [
        "epochs=5",
        "warmup_epochs=1",
        "n_local_crops=2",
        "global_size=32",
        "local_size=16",
        "patch=8",
        "prototypes=64",
    ] {
        config.apply_override(kv)?;
    }
    let (mut images, mut size, mut test_images) = (256usize, 32usize, 256usize);
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some(("images", v)) => images = v.parse().expect("images"),
            Some(("image_size", v)) => size = v.parse().expect("image_size"),
            Some(("test_images", v)) => test_images = v.parse().expect("test_images"),
            _ => config.apply_override(&arg)?,
        }
    }
    let train_set = synthesize(&SynthConfig {
        n_images: images,
        n_classes: 8,
        size,
        seed: 1,
    })?;
    let test_set = synthesize(&SynthConfig {
        n_images: test_images,
        n_classes: 8,
        size,
        seed: 2,
    })?;

    let report = |label: &str, params: &glsd::model::Params, cfg: &glsd::model::BackboneConfig| -> glsd::Result<()> {
        let bank = EmbeddingBank::build(params, cfg, &train_set.images, &train_set.labels, config.global_size)?;
        let queries = glsd::eval::embed_images(params, cfg, &test_set.images, config.global_size)?;
        let knn = knn_eval(
            &bank,
            &queries,
            &test_set.labels,
            KnnOptions {
                k: 5,
                ..Default::default()
            },
        )?;
        let corr = correspondence_eval(
            params,
            cfg,
            &test_set.images[..64.min(test_set.len())],
            &config.crops(),
            7,
        )?;
        println!(
            "{label:>8}: knn5 {:.3}  corr_acc {:.3}  corr_err {:.2}px  collapse {:.3}",
            knn, corr.accuracy, corr.distance_error, corr.collapse_index
        );
        Ok(())
    };

    let init = init_state(&config)?;
    report("random", &init.teacher, &init.config)?;

    let start = Instant::now();
    let mut last_epoch = usize::MAX;
    let outcome = train_with(&config, &train_set, None, |m| {
        if m.epoch != last_epoch {
            last_epoch = m.epoch;
            println!(
                "epoch {:>3} step {:>5} loss {:.4} (global {:.4}, local {:.4}) fill {:.2} collapse {:.3} lr {:.2e}",
                m.epoch, m.step, m.loss_total, m.loss_global, m.loss_local, m.mask_fill_rate, m.collapse_index, m.lr
            );
        }
    })?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "trained {} steps in {secs:.1}s ({:.1} ms/step)",
        outcome.metrics.len(),
        1e3 * secs / outcome.metrics.len().max(1) as f64
    );
    report("teacher", &outcome.state.teacher, &outcome.state.config)?;
    report("student", &outcome.state.student, &outcome.state.config)?;
    Ok(())
}
