//! Average Value-at-Risk of splat signed distances and the risk field.
//!
//! For a vertex `q` and splat `N(μ, σ²I)`, the signed distance
//! `⟨x − q, (μ − q)/‖μ − q‖⟩` is normal with mean `‖μ − q‖` and standard
//! deviation `σ`. Its lower-tail AVaR at level `ε` has the closed form
//!
//! ```text
//! AV@R_ε = mean − σ / (√(2π) · ε · exp(ι²)),   ι = erf⁻¹(2ε − 1)
//! ```
//!
//! The risk field keeps the minimum over splats, so larger values are safer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::scene::{Lattice, Scene, Splat, Vec3};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Inverse error function, accurate to about 1e−15 on `(−1, 1)`.
///
/// A polynomial guess in `w = −ln(1 − x²)` (Giles 2012) is refined by two
/// Newton steps against a full-precision `erf`.
pub fn inverse_erf(x: f64) -> Result<f64> {
    if !(x.abs() < 1.0) {
        return Err(Error::Domain(format!("inverse_erf needs |x| < 1, got {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let w = -((1.0 - x) * (1.0 + x)).ln();
    let guess = if w < 5.0 {
        let w = w - 2.5;
        let mut p = 2.810_226_36e-08;
        p = 3.432_739_39e-07 + p * w;
        p = -3.523_387_7e-06 + p * w;
        p = -4.391_506_54e-06 + p * w;
        p = 0.000_218_580_87 + p * w;
        p = -0.001_253_725_03 + p * w;
        p = -0.004_177_681_64 + p * w;
        p = 0.246_640_727 + p * w;
        p = 1.501_409_41 + p * w;
        p * x
    } else {
        let w = w.sqrt() - 3.0;
        let mut p = -0.000_200_214_257;
        p = 0.000_100_950_558 + p * w;
        p = 0.001_349_343_22 + p * w;
        p = -0.003_673_428_44 + p * w;
        p = 0.005_739_507_73 + p * w;
        p = -0.007_622_461_3 + p * w;
        p = 0.009_438_870_47 + p * w;
        p = 1.001_674_06 + p * w;
        p = 2.832_976_82 + p * w;
        p * x
    };
    let mut y = guess;
    for _ in 0..2 {
        let slope = TWO_OVER_SQRT_PI * (-y * y).exp();
        y -= (statrs::function::erf::erf(y) - x) / slope;
    }
    Ok(y)
}

/// Distribution of the signed distance from a query point to one splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceStats {
    pub mean: f64,
    pub stddev: f64,
    /// Query within 1e−9 m of the mean: direction undefined, mean forced to 0.
    pub degenerate: bool,
}

pub fn signed_distance_stats(q: &Vec3, splat: &Splat) -> DistanceStats {
    let dist = (splat.mu - q).norm();
    if dist <= 1e-9 {
        DistanceStats {
            mean: 0.0,
            stddev: splat.sigma,
            degenerate: true,
        }
    } else {
        DistanceStats {
            mean: dist,
            stddev: splat.sigma,
            degenerate: false,
        }
    }
}

/// One realisation of the signed distance for a sample `x` of the splat.
pub fn signed_distance(q: &Vec3, mu: &Vec3, x: &Vec3) -> f64 {
    let dir = (mu - q).normalize();
    (x - q).dot(&dir)
}

/// A validated risk level `ε ∈ (0, 1)` with its tail factor cached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskLevel {
    epsilon: f64,
    tail: f64,
}

impl RiskLevel {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!(
                "risk level must lie in (0, 1), got {epsilon}"
            )));
        }
        let iota = inverse_erf(2.0 * epsilon - 1.0)?;
        Ok(RiskLevel {
            epsilon,
            tail: 1.0 / (SQRT_2PI * epsilon * (iota * iota).exp()),
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `1/(√(2π) ε exp(ι²))`: AVaR shortfall per unit standard deviation.
    pub fn tail_factor(&self) -> f64 {
        self.tail
    }

    pub fn avar(&self, mean: f64, stddev: f64) -> f64 {
        mean - stddev * self.tail
    }
}

/// Lower-tail AVaR of `N(mean, stddev²)`.
pub fn avar_normal(mean: f64, stddev: f64, epsilon: f64) -> Result<f64> {
    if !(stddev >= 0.0) {
        return Err(Error::Domain(format!(
            "stddev must be nonnegative, got {stddev}"
        )));
    }
    Ok(RiskLevel::new(epsilon)?.avar(mean, stddev))
}

fn min_avar(q: &Vec3, splats: &[Splat], level: &RiskLevel) -> f64 {
    splats
        .iter()
        .map(|s| {
            let d = signed_distance_stats(q, s);
            level.avar(d.mean, d.stddev)
        })
        .fold(f64::INFINITY, f64::min)
}

/// `α(q)`: the minimum AVaR over all splats.
pub fn risk_at(q: &Vec3, scene: &Scene, epsilon: f64) -> Result<f64> {
    Ok(min_avar(q, scene.splats(), &RiskLevel::new(epsilon)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskField {
    pub lattice: Lattice,
    pub values: Vec<f64>,
    pub epsilon: f64,
}

pub fn build_risk_field(scene: &Scene, lattice: &Lattice, epsilon: f64) -> Result<RiskField> {
    let level = RiskLevel::new(epsilon)?;
    let values = (0..lattice.len())
        .into_par_iter()
        .map(|v| min_avar(&lattice.position(v), scene.splats(), &level))
        .collect();
    Ok(RiskField {
        lattice: *lattice,
        values,
        epsilon,
    })
}

/// Affine map from α onto graymap levels, as written next to slice images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMapping {
    /// α mapped to 0.
    pub alpha_min: f64,
    /// α mapped to 255.
    pub alpha_max: f64,
    pub axis: char,
    pub slices: usize,
}

impl RiskField {
    pub fn value(&self, vertex: usize) -> f64 {
        self.values[vertex]
    }

    /// Field value at the vertex nearest to `p`.
    pub fn value_near(&self, p: &Vec3) -> f64 {
        self.values[self.lattice.snap(p).0]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with columns `i,j,k,x,y,z,alpha`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,k,x,y,z,alpha\n");
        for (v, a) in self.values.iter().enumerate() {
            let [i, j, k] = self.lattice.coords(v);
            let p = self.lattice.position(v);
            let _ = writeln!(out, "{i},{j},{k},{},{},{},{a}", p.x, p.y, p.z);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One graymap per k-slice (`slice_KKK.pgm`, x across, y down) plus
    /// `slices.json` recording the α range behind the gray levels.
    pub fn write_slices(&self, dir: impl AsRef<Path>) -> Result<SliceMapping> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let [ni, nj, nk] = self.lattice.dims();
        let (lo, hi) = (self.min(), self.max());
        let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
        for k in 0..nk {
            let mut data = Vec::with_capacity(ni * nj);
            for j in 0..nj {
                for i in 0..ni {
                    let a = self.values[self.lattice.index([i, j, k])];
                    data.push(((a - lo) * scale).round().clamp(0.0, 255.0) as u8);
                }
            }
            pnm::write_pgm8(dir.join(format!("slice_{k:03}.pgm")), ni, nj, &data)?;
        }
        let mapping = SliceMapping {
            alpha_min: lo,
            alpha_max: hi,
            axis: 'z',
            slices: nk,
        };
        let path = dir.join("slices.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&mapping).expect("mapping serializes"),
        )
        .map_err(|e| Error::io(&path, e))?;
        Ok(mapping)
    }
}
