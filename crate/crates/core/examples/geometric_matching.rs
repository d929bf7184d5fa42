//! Token centres of two overlapping crops and their geometric matching.
//!
//! ```text
//! cargo run --release --example geometric_matching
//! ```

use glsd::geometry::{geometric_match, token_centers, DownscaleSpec, GeoParams};

fn main() -> glsd::Result<()> {
    let spec = DownscaleSpec::new(8)?;
    // a 32x32 global view of the whole image and a zoomed, flipped local view
    let global = GeoParams::full(64, 64, 32, 32, false);
    let local = GeoParams {
        ul_x: 20.0,
        ul_y: 8.0,
        lr_x: 52.0,
        lr_y: 40.0,
        h: 16,
        w: 16,
        flip: true,
    };
    let pg = token_centers(&global, &spec)?;
    let pl = token_centers(&local, &spec)?;
    println!("global: {:?} grid, token diagonal {:.2}px", pg.grid, pg.diag);
    println!("local:  {:?} grid, token diagonal {:.2}px", pl.grid, pl.diag);

    let m = geometric_match(&pl, &pg)?;
    println!(
        "threshold s = {:.2}px, {} of {} tokens active",
        m.threshold.unwrap_or(0.0),
        m.active(),
        m.len()
    );
    for (k, &t) in m.target.iter().enumerate() {
        let [x, y] = pl.centers[k];
        let [tx, ty] = pg.centers[t];
        println!(
            "local {k} ({x:5.1},{y:5.1}) -> global {t:>2} ({tx:5.1},{ty:5.1})  d = {:.2}  {}",
            m.distance[k],
            if m.mask[k] { "kept" } else { "masked" }
        );
    }

    let far = GeoParams {
        ul_x: 0.0,
        ul_y: 0.0,
        lr_x: 16.0,
        lr_y: 16.0,
        h: 16,
        w: 16,
        flip: false,
    };
    let other = far.translated(40.0, 40.0);
    let m = geometric_match(&token_centers(&far, &spec)?, &token_centers(&other, &spec)?)?;
    println!("disjoint crops: {} active tokens", m.active());
    Ok(())
}
