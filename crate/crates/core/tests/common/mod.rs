//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use glsd::geometry::{GeoParams, PosEncoding};
use glsd::numerics::Tensor;
use glsd::trainer::TrainConfig;

/// Model small enough for coordinate-wise finite differences.
pub const TINY: [&str; 10] = [
    "patch=4",
    "dim=8",
    "depth=1",
    "mlp_hidden=16",
    "head_hidden=16",
    "head_bottleneck=8",
    "prototypes=16",
    "global_size=16",
    "local_size=8",
    "n_local_crops=2",
];

pub fn config(overrides: &[&str]) -> TrainConfig {
    let mut c = TrainConfig::default();
    for kv in overrides {
        c.apply_override(kv).unwrap();
    }
    c
}

/// Geometric matching from the full distance matrix: first index attaining
/// each row minimum, threshold from the crop extents.
pub fn geometric_oracle(
    a: &PosEncoding,
    b: &PosEncoding,
    ga: &GeoParams,
    gb: &GeoParams,
) -> (Vec<usize>, Vec<f64>, Vec<bool>) {
    let d: Vec<Vec<f64>> = a
        .centers
        .iter()
        .map(|p| {
            b.centers
                .iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .collect()
        })
        .collect();
    let diag = |g: &GeoParams, grid: (usize, usize)| {
        let sx = (g.lr_x - g.ul_x) / grid.1 as f64;
        let sy = (g.lr_y - g.ul_y) / grid.0 as f64;
        (sx * sx + sy * sy).sqrt()
    };
    let s = 0.5 * diag(ga, a.grid).max(diag(gb, b.grid));
    let mut target = Vec::new();
    let mut dist = Vec::new();
    for row in &d {
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        target.push(row.iter().position(|&v| v == min).unwrap());
        dist.push(min);
    }
    let mask = dist.iter().map(|&v| v < s).collect();
    (target, dist, mask)
}

/// Similarity matching from the full cosine matrix.
pub fn similarity_oracle(z: &Tensor, zo: &Tensor) -> Vec<usize> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.iter_rows()
        .map(|a| {
            let sims: Vec<f64> = zo
                .iter_rows()
                .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b)))
                .collect();
            let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&v| v == max).unwrap()
        })
        .collect()
}
