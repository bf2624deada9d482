use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::planner::PathSegment;
use crate::renderer::{render, RenderedImage};
use crate::risk::RiskField;
use crate::scene::{make_pose, CameraIntrinsics, Scene, Vec3};

/// Reported in place of +∞ for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const CORRIDOR_SAMPLES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Safety {
    pub min_alpha: f64,
    pub mean_alpha: f64,
}

/// Minimum and mean of α over the path waypoints.
pub fn safety_measure(path: &PathSegment, field: &RiskField) -> Safety {
    let values: Vec<f64> = path.waypoints.iter().map(|&v| field.values[v]).collect();
    Safety {
        min_alpha: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean_alpha: values.iter().sum::<f64>() / values.len() as f64,
    }
}

/// `100 (optimized − nominal) / nominal`, or `None` when the nominal view
/// carries no information.
pub fn eig_gain_percent(nominal: f64, optimized: f64) -> Option<f64> {
    (nominal > 0.0).then(|| 100.0 * (optimized - nominal) / nominal)
}

/// Color PSNR with peak 1.0, capped at [`PSNR_CAP`].
pub fn psnr(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .color
        .iter()
        .zip(&b.color)
        .flat_map(|(x, y)| (0..3).map(move |c| (x[c] - y[c]).powi(2)))
        .sum();
    let mse = sum / (3 * a.pixel_count()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean absolute depth difference in meters.
pub fn depth_mae(a: &RenderedImage, b: &RenderedImage) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a
        .depth
        .iter()
        .zip(&b.depth)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.pixel_count() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorRow {
    pub radius: f64,
    pub psnr: f64,
    pub depth_mae: f64,
}

fn unit_ball(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm_squared() <= 1.0 {
            return p;
        }
    }
}

/// Reconstruction quality near the executed path. Every radius reuses the
/// same draws (waypoint, unit-ball offset, yaw), so rows differ only by the
/// offset scale.
pub fn corridor_eval(
    gt: &Scene,
    estimate: &Scene,
    executed: &[Vec3],
    radii: &[f64],
    cam: &CameraIntrinsics,
    seed: u64,
) -> Result<Vec<CorridorRow>> {
    if executed.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(Vec3, Vec3, f64)> = (0..CORRIDOR_SAMPLES)
        .map(|_| {
            let w = executed[rng.random_range(0..executed.len())];
            let u = unit_ball(&mut rng);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            (w, u, yaw)
        })
        .collect();
    radii
        .iter()
        .map(|&radius| {
            let (mut p_sum, mut d_sum) = (0.0, 0.0);
            for (w, u, yaw) in &draws {
                let pose = make_pose(w + u * radius, *yaw)?;
                let a = render(gt, &pose, cam);
                let b = render(estimate, &pose, cam);
                p_sum += psnr(&a, &b)?;
                d_sum += depth_mae(&a, &b)?;
            }
            let n = draws.len() as f64;
            Ok(CorridorRow {
                radius,
                psnr: p_sum / n,
                depth_mae: d_sum / n,
            })
        })
        .collect()
}
