//! Multi-crop view generation for one synthetic image. Writes the source
//! and every view as PPM files into the directory given as the first
//! argument (default `views/`).
//!
//! ```text
//! cargo run --release --example multi_crop_views -- /tmp/views
//! ```

use std::path::PathBuf;

use glsd::augment::make_views;
use glsd::data::{synthesize, SynthConfig, FAMILIES};
use glsd::losses::PairScheme;
use glsd::trainer::TrainConfig;

fn main() -> glsd::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "views".into()));
    std::fs::create_dir_all(&dir).map_err(|e| glsd::Error::io(&dir, e))?;
    let mut config = TrainConfig::default();
    for kv in ["global_size=32", "local_size=16", "patch=8", "n_local_crops=4"] {
        config.apply_override(kv)?;
    }
    let set = synthesize(&SynthConfig {
        n_images: 8,
        n_classes: 8,
        size: 64,
        seed: 11,
    })?;
    let image = &set.images[5];
    println!("source: {} texture, 64x64", FAMILIES[set.labels[5]]);
    write(&dir.join("source.ppm"), &image.to_ppm())?;

    let crops = config.crops();
    let views = make_views(image, &crops, 42)?;
    for (i, v) in views.views.iter().enumerate() {
        let g = &v.geo;
        println!(
            "view {i} ({}): crop ({:.1},{:.1})-({:.1},{:.1}) -> {}x{} flip {} blur {} solarize {}",
            if v.is_global { "global" } else { "local" },
            g.ul_x,
            g.ul_y,
            g.lr_x,
            g.lr_y,
            g.w,
            g.h,
            g.flip,
            if v.photo.blur {
                format!("{:.2}", v.photo.blur_sigma)
            } else {
                "off".into()
            },
            v.photo.solarize
        );
        write(&dir.join(format!("view{i}.ppm")), &v.image.to_ppm())?;
    }
    let n_local = views.locals().len();
    println!(
        "loss pairs: {} with the teacher on globals, {} with the teacher on all views",
        PairScheme::MultiCrop { n_local }.normalizer(),
        PairScheme::AllViews { n: views.views.len() }.normalizer()
    );
    println!("wrote PPM files to {}", dir.display());
    Ok(())
}

fn write(path: &std::path::Path, bytes: &[u8]) -> glsd::Result<()> {
    std::fs::write(path, bytes).map_err(|e| glsd::Error::io(path, e))
}
