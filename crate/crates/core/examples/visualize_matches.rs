//! Geometric and similarity matchings between two views of a synthetic
//! image, rendered as SVG into the directory given as the first argument
//! (default `figures/`).
//!
//! ```text
//! cargo run --release --example visualize_matches -- /tmp/figures
//! ```

use std::path::PathBuf;

use glsd::augment::make_views;
use glsd::data::{synthesize, SynthConfig};
use glsd::geometry::{geometric_match, similarity_match, token_centers};
use glsd::model::encode;
use glsd::trainer::{init_state, TrainConfig};
use glsd::viz::{render_svg, Panel, VizOptions};

fn main() -> glsd::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "figures".into()));
    let mut config = TrainConfig::default();
    for kv in ["global_size=32", "local_size=16", "patch=8", "n_local_crops=2"] {
        config.apply_override(kv)?;
    }
    let set = synthesize(&SynthConfig {
        n_images: 8,
        n_classes: 8,
        size: 48,
        seed: 3,
    })?;
    let crops = config.crops();
    let views = make_views(&set.images[3], &crops, 9)?;
    let state = init_state(&config)?;
    let (a, b) = (&views.views[2], &views.views[0]);
    let pa = token_centers(&a.geo, &crops.downscale)?;
    let pb = token_centers(&b.geo, &crops.downscale)?;
    let (_, za) = encode(&state.teacher, &state.config, &[&a.image])?;
    let (_, zb) = encode(&state.teacher, &state.config, &[&b.image])?;
    let pa_panel = Panel {
        image: &a.image,
        geo: &a.geo,
        pos: &pa,
    };
    let pb_panel = Panel {
        image: &b.image,
        geo: &b.geo,
        pos: &pb,
    };
    std::fs::create_dir_all(&dir).map_err(|e| glsd::Error::io(&dir, e))?;
    for (name, m) in [
        ("geometric", geometric_match(&pa, &pb)?),
        ("similarity", similarity_match(&za, &zb)?),
    ] {
        let svg = render_svg(&pa_panel, &pb_panel, &m, &VizOptions::default())?;
        let path = dir.join(format!("{name}.svg"));
        std::fs::write(&path, svg).map_err(|e| glsd::Error::io(&path, e))?;
        println!(
            "{name}: {} of {} tokens active -> {}",
            m.active(),
            m.len(),
            path.display()
        );
    }
    Ok(())
}
