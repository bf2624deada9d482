#![allow(dead_code, clippy::needless_range_loop)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use riskview::planner::SafeSet;
use riskview::renderer::{render, JacobianBlock, PARAMS_PER_SPLAT};
use riskview::scene::{Bounds, CameraIntrinsics, Lattice, Pose, Scene, Splat, Vec3};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn cam32() -> CameraIntrinsics {
    CameraIntrinsics::new(32.0, 32, 32, 0.05, 10.0).unwrap()
}

pub fn wide_bounds() -> Bounds {
    Bounds::new(Vec3::repeat(-20.0), Vec3::repeat(20.0))
}

pub fn random_color(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(rng.random(), rng.random(), rng.random())
}

/// `n` splats with means uniform in the box `[lo, hi]³`.
pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Scene {
    let splats = (0..n)
        .map(|_| {
            let mu = Vec3::new(
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            );
            Splat::new(
                mu,
                rng.random_range(0.05..0.4),
                rng.random_range(0.1..0.95),
                random_color(rng),
            )
        })
        .collect();
    Scene::new(splats, wide_bounds()).unwrap()
}

#[derive(Clone, Copy, PartialEq)]
struct Item(f64, usize);

impl Eq for Item {}

impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plain Dijkstra over the 26-connected safe graph, written against the
/// lattice coordinates directly. Returns distances and predecessors.
pub fn dijkstra(safe: &SafeSet, start: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let lat = safe.lattice();
    let dims = lat.dims();
    let mut dist = vec![f64::INFINITY; lat.len()];
    let mut prev = vec![None; lat.len()];
    dist[start] = 0.0;
    let mut heap = BinaryHeap::from([Item(0.0, start)]);
    while let Some(Item(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        let [i, j, k] = lat.coords(u);
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                for dk in -1i64..=1 {
                    if di == 0 && dj == 0 && dk == 0 {
                        continue;
                    }
                    let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    if a < 0
                        || b < 0
                        || c < 0
                        || a >= dims[0] as i64
                        || b >= dims[1] as i64
                        || c >= dims[2] as i64
                    {
                        continue;
                    }
                    let v = lat.index([a as usize, b as usize, c as usize]);
                    if !safe.contains(v) {
                        continue;
                    }
                    let w = ((di * di + dj * dj + dk * dk) as f64).sqrt() * lat.spacing();
                    if d + w < dist[v] {
                        dist[v] = d + w;
                        prev[v] = Some(u);
                        heap.push(Item(d + w, v));
                    }
                }
            }
        }
    }
    (dist, prev)
}

/// Exact cost of a vertex path: steps counted by type, then weighted by
/// 1, √2 and √3 in that order.
pub fn step_cost(lat: &Lattice, path: &[usize]) -> f64 {
    let mut counts = [0usize; 4];
    for w in path.windows(2) {
        let (a, b) = (lat.coords(w[0]), lat.coords(w[1]));
        let sq: usize = (0..3).map(|x| a[x].abs_diff(b[x]).pow(2)).sum();
        counts[sq] += 1;
    }
    (1..4)
        .filter(|&s| counts[s] > 0)
        .map(|s| counts[s] as f64 * (s as f64).sqrt())
        .sum::<f64>()
        * lat.spacing()
}

pub fn unwind(prev: &[Option<usize>], goal: usize) -> Vec<usize> {
    let mut path = vec![goal];
    while let Some(p) = prev[*path.last().unwrap()] {
        path.push(p);
    }
    path.reverse();
    path
}

pub fn get_param(s: &Splat, p: usize) -> f64 {
    match p {
        0..=2 => s.mu[p],
        3 => s.sigma,
        4 => s.opacity,
        _ => s.color[p - 5],
    }
}

pub fn set_param(s: &mut Splat, p: usize, v: f64) {
    match p {
        0..=2 => s.mu[p] = v,
        3 => s.sigma = v,
        4 => s.opacity = v,
        _ => s.color[p - 5] = v,
    }
}

/// Central-difference Jacobian, laid out like `render_jacobian`:
/// `[pixel][splat]`, rows (r, g, b, depth / far).
pub fn fd_jacobian(
    scene: &Scene,
    pose: &Pose,
    cam: &CameraIntrinsics,
    rel_step: f64,
) -> Vec<Vec<JacobianBlock>> {
    let n = scene.len();
    let pixels = cam.pixel_count();
    let mut out = vec![vec![[[0.0; PARAMS_PER_SPLAT]; 4]; n]; pixels];
    for i in 0..n {
        for p in 0..PARAMS_PER_SPLAT {
            let base = get_param(&scene.splats()[i], p);
            let h = rel_step * base.abs().max(1.0);
            let shifted = |delta: f64| {
                let mut splats = scene.splats().to_vec();
                set_param(&mut splats[i], p, base + delta);
                render(&Scene::new(splats, *scene.bounds()).unwrap(), pose, cam)
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            for px in 0..pixels {
                for c in 0..3 {
                    out[px][i][c][p] = (plus.color[px][c] - minus.color[px][c]) / (2.0 * h);
                }
                out[px][i][3][p] = (plus.depth[px] - minus.depth[px]) / (2.0 * h * cam.far);
            }
        }
    }
    out
}

/// Largest violation of `|a − b| ≤ rel·max(|a|, |b|) + abs` over paired
/// entries, as a ratio (≤ 1 passes).
pub fn worst_ratio(
    a: impl IntoIterator<Item = f64>,
    b: impl IntoIterator<Item = f64>,
    rel: f64,
    abs: f64,
) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (rel * x.abs().max(y.abs()) + abs))
        .fold(0.0, f64::max)
}

/// Empirical lower-tail conditional mean of `N(mean, sd²)` below the
/// ε-quantile, with its standard error.
pub fn monte_carlo_avar(mean: f64, sd: f64, eps: f64, n: usize, seed: u64) -> (f64, f64) {
    const CHUNK: usize = 1 << 16;
    let mut samples = vec![0.0; n];
    samples
        .par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            for x in chunk {
                let z: f64 = rng.sample(StandardNormal);
                *x = mean + sd * z;
            }
        });
    let k = (eps * n as f64).floor() as usize;
    let (tail, q, _) = samples.select_nth_unstable_by(k, f64::total_cmp);
    let q = *q;
    let m = tail.iter().sum::<f64>() / k as f64;
    let var = tail.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1) as f64;
    let se = ((var + (1.0 - eps) * (m - q).powi(2)) / (eps * n as f64)).sqrt();
    (m, se)
}

/// Copy of `scene` with splat `i` edited by `f`.
pub fn edited(scene: &Scene, i: usize, f: impl FnOnce(&mut Splat)) -> Scene {
    let mut splats = scene.splats().to_vec();
    f(&mut splats[i]);
    Scene::new(splats, *scene.bounds()).unwrap()
}
