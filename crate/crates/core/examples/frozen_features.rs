//! k-NN and linear-probe accuracy of frozen features, plus dense
//! correspondence, for a randomly initialised backbone.
//!
//! ```text
//! cargo run --release --example frozen_features
//! ```

use glsd::data::{synthesize, SynthConfig};
use glsd::eval::{evaluate, EvalOptions, KnnOptions};
use glsd::trainer::{init_state, TrainConfig};

fn main() -> glsd::Result<()> {
    let mut config = TrainConfig::default();
    for kv in ["global_size=32", "local_size=16", "patch=8", "prototypes=64"] {
        config.apply_override(kv)?;
    }
    let synth = |seed| {
        synthesize(&SynthConfig {
            n_images: 256,
            n_classes: 8,
            size: 32,
            seed,
        })
    };
    let (train, test) = (synth(1)?, synth(2)?);
    let state = init_state(&config)?;
    for k in [1, 5, 20] {
        let opts = EvalOptions {
            knn: KnnOptions {
                k,
                ..Default::default()
            },
            corr_images: 64,
            ..Default::default()
        };
        let r = evaluate(
            &state.teacher,
            &state.config,
            config.global_size,
            &config.crops(),
            (&train.images, &train.labels),
            Some((&test.images, &test.labels)),
            &opts,
        )?;
        println!("k = {k:>2}: {}", serde_json::to_string(&r)?);
    }
    Ok(())
}
