//! Regenerates the shipped fixture scenes and configs.
//!
//! ```text
//! cargo run -p riskview-core --example make_fixtures -- crates/core/fixtures
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskview::scene::{save_scene, Bounds, Scene, Splat, Vec3};

const PATH_Y: f64 = 1.6;
const PATH_Z: f64 = 1.6;

fn random_color(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    )
}

/// Cross wall in the plane `x = x` spanning the corridor on a 0.2 m grid,
/// with every `y` listed in `gap` left out.
fn wall(x: f64, gap: &[f64], rng: &mut ChaCha8Rng) -> Vec<Splat> {
    let mut out = Vec::new();
    for a in 0..8 {
        let y = 1.0 + 0.2 * a as f64;
        if gap.iter().any(|g| (g - y).abs() < 1e-9) {
            continue;
        }
        for b in 0..7 {
            let z = 1.0 + 0.2 * b as f64;
            out.push(Splat::new(Vec3::new(x, y, z), 0.05, 0.9, random_color(rng)));
        }
    }
    out
}

/// Side walls of the corridor, parallel to the path.
fn corridor(rng: &mut ChaCha8Rng) -> Vec<Splat> {
    let mut out = Vec::new();
    for y in [0.9, 2.5] {
        for a in 0..8 {
            for b in 0..4 {
                let mu = Vec3::new(0.2 + 0.4 * a as f64, y, 1.0 + 0.4 * b as f64);
                out.push(Splat::new(mu, 0.1, 0.9, random_color(rng)));
            }
        }
    }
    out
}

/// Enclosing room outside the lattice so that every view sees something.
fn room(rng: &mut ChaCha8Rng) -> Vec<Splat> {
    let (lo, hi) = (-0.5, 3.7);
    let mut out = Vec::new();
    for a in 0..9 {
        let t = 0.4 * a as f64;
        for z in [1.4, 1.8] {
            for mu in [
                Vec3::new(lo, t, z),
                Vec3::new(hi, t, z),
                Vec3::new(t, lo, z),
                Vec3::new(t, hi, z),
            ] {
                out.push(Splat::new(mu, 0.2, 0.95, random_color(rng)));
            }
        }
    }
    out
}

fn perturb(gt: &Scene, rng: &mut ChaCha8Rng) -> Scene {
    let splats = gt
        .splats()
        .iter()
        .map(|s| {
            let jitter = Vec3::new(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
            );
            let color = s
                .color
                .map(|c| (c + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0));
            Splat::new(s.mu + jitter, s.sigma, s.opacity, color)
        })
        .collect();
    Scene::new(splats, *gt.bounds()).expect("jittered fixture stays valid")
}

fn config(name: &str, seed: u64, xs: &[f64]) -> String {
    let trajectory: Vec<String> = xs
        .iter()
        .map(|x| format!("[{x:.1}, {PATH_Y:.1}, {PATH_Z:.1}]"))
        .collect();
    format!(
        r#"ground_truth = "{name}_gt.json"
estimate = "{name}_est.json"
seed = {seed}
trajectory = [{}]
epsilon = 0.05
gamma = 0.10
margin = 0.4
delta = 0.3
delta_retries = 5
beta1 = 1.0
beta2 = 1.1
w_alpha = 1.0
w_beta = 1.1
corridor_radii = [0.1, 0.2, 0.3]

[lattice]
origin = [0.0, 0.0, 0.0]
spacing = 0.1
dims = [33, 33, 33]

[camera]
focal = 32.0
width = 32
height = 32
near = 0.05
far = 10.0

[nbv]
starts = 8
step = 0.2
max_iters = 20
fd_step = 0.01
batch_fraction = 1.0
lambda = 1e-6
eig_stop_fraction = 0.01

[refine]
steps = 5
step_size = 1.0
geometry_step_size = 5e-3
depth_weight = 0.5
"#,
        trajectory.join(", ")
    )
}

fn write_fixture(
    dir: &Path,
    name: &str,
    seed: u64,
    splats: Vec<Splat>,
    xs: &[f64],
    rng: &mut ChaCha8Rng,
) {
    let bounds = Bounds::new(Vec3::repeat(-1.0), Vec3::repeat(4.2));
    let gt = Scene::new(splats, bounds).expect("fixture scene is valid");
    let est = perturb(&gt, rng);
    save_scene(&gt, dir.join(format!("{name}_gt.json"))).unwrap();
    save_scene(&est, dir.join(format!("{name}_est.json"))).unwrap();
    std::fs::write(dir.join(format!("{name}.toml")), config(name, seed, xs)).unwrap();
    println!("{name}: {} splats", gt.len());
}

fn main() {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "fixtures".into());
    std::fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);

    let mut splats = wall(1.6, &[1.8, 2.0], &mut rng);
    splats.extend(corridor(&mut rng));
    splats.extend(room(&mut rng));
    write_fixture(
        &dir,
        "corridor_with_pocket",
        11,
        splats,
        &[0.4, 1.2, 2.0, 2.8],
        &mut rng,
    );

    let mut splats = wall(1.2, &[1.2, 1.4], &mut rng);
    splats.extend(wall(2.2, &[1.8, 2.0], &mut rng));
    splats.extend(corridor(&mut rng));
    splats.extend(room(&mut rng));
    write_fixture(
        &dir,
        "two_wall",
        12,
        splats,
        &[0.4, 0.8, 1.6, 2.6, 2.9],
        &mut rng,
    );
}
