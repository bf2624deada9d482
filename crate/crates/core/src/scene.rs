//! Scene primitives: isotropic splats, camera poses, pinhole intrinsics and
//! the rectilinear lattice that risk fields and plans live on.
//!
//! World frame is z-up. A camera at yaw `ψ` looks along
//! `(cos ψ, sin ψ, 0)`; its frame is x-right, y-down, z-forward, so the
//! third camera coordinate is depth.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// One isotropic Gaussian primitive, covariance `sigma² I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub mu: Vec3,
    pub sigma: f64,
    pub opacity: f64,
    pub color: Vec3,
}

impl Splat {
    pub fn new(mu: Vec3, sigma: f64, opacity: f64, color: Vec3) -> Self {
        Splat {
            mu,
            sigma,
            opacity,
            color,
        }
    }

    /// Checks the type invariants, returning the first violated one.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.mu.iter().all(|v| v.is_finite()) {
            return Err("mu must be finite".into());
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err("sigma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err("opacity must lie in [0, 1]".into());
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err("color channels must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Bounds { min, max }
    }

    pub fn contains(&self, p: &Vec3, inflate: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - inflate && p[a] <= self.max[a] + inflate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    bounds: Bounds,
    splats: Vec<Splat>,
}

impl Scene {
    /// Builds a validated scene. Splat order is preserved and acts as the
    /// compositing tie-break.
    pub fn new(splats: Vec<Splat>, bounds: Bounds) -> Result<Self> {
        let scene = Scene { bounds, splats };
        scene.validate()?;
        Ok(scene)
    }

    fn validate(&self) -> Result<()> {
        if self.splats.is_empty() {
            return Err(Error::InvalidScene("scene has no splats".into()));
        }
        let b = &self.bounds;
        if !(0..3).all(|a| b.min[a].is_finite() && b.max[a].is_finite() && b.min[a] <= b.max[a]) {
            return Err(Error::InvalidScene(
                "bounds must be finite with min <= max".into(),
            ));
        }
        for (index, s) in self.splats.iter().enumerate() {
            s.validate()
                .map_err(|reason| Error::InvalidSplat { index, reason })?;
        }
        let sigma_max = self.splats.iter().map(|s| s.sigma).fold(0.0, f64::max);
        for (index, s) in self.splats.iter().enumerate() {
            if !b.contains(&s.mu, 3.0 * sigma_max) {
                return Err(Error::InvalidSplat {
                    index,
                    reason: "mean lies outside the scene bounds".into(),
                });
            }
        }
        Ok(())
    }

    pub fn splats(&self) -> &[Splat] {
        &self.splats
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Returns a copy with every splat mean shifted by `offset`.
    pub fn translated(&self, offset: &Vec3) -> Scene {
        Scene {
            bounds: Bounds::new(self.bounds.min + offset, self.bounds.max + offset),
            splats: self
                .splats
                .iter()
                .map(|s| Splat {
                    mu: s.mu + offset,
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Parameter storage without re-validation, for optimizers that
    /// project back into the valid domain themselves.
    pub(crate) fn splats_mut(&mut self) -> &mut [Splat] {
        &mut self.splats
    }

    pub fn from_json(text: &str) -> std::result::Result<Scene, String> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| e.to_string())?;
        scene.validate().map_err(|e| e.to_string())?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// Reads and validates a scene file.
pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene.to_json()).map_err(|e| Error::io(path, e))
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(angle: f64) -> f64 {
    if (-PI..PI).contains(&angle) {
        return angle;
    }
    let mut y = (angle + PI).rem_euclid(TAU) - PI;
    if y >= PI {
        y -= TAU;
    }
    y
}

/// Camera pose restricted to a position and a yaw about world z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    position: Vec3,
    yaw: f64,
}

pub fn make_pose(position: Vec3, yaw: f64) -> Result<Pose> {
    if !position.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
        return Err(Error::InvalidPose("position and yaw must be finite".into()));
    }
    Ok(Pose {
        position,
        yaw: wrap_angle(yaw),
    })
}

impl Pose {
    pub fn position(&self) -> &Vec3 {
        &self.position
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn with_yaw(&self, yaw: f64) -> Pose {
        Pose {
            position: self.position,
            yaw: wrap_angle(yaw),
        }
    }

    /// Camera axes in world coordinates: (right, down, forward).
    pub fn axes(&self) -> [Vec3; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            Vec3::new(s, -c, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(c, s, 0.0),
        ]
    }
}

/// World point to camera frame (x right, y down, z forward).
pub fn camera_transform(pose: &Pose, point: &Vec3) -> Vec3 {
    let d = point - pose.position;
    let [r, dn, f] = pose.axes();
    Vec3::new(r.dot(&d), dn.dot(&d), f.dot(&d))
}

/// Inverse of [`camera_transform`].
pub fn camera_to_world(pose: &Pose, point: &Vec3) -> Vec3 {
    let [r, dn, f] = pose.axes();
    pose.position + r * point.x + dn * point.y + f * point.z
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let cam = CameraIntrinsics {
            focal,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::InvalidCamera("focal must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidCamera("need 0 < near < far".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidCamera("image must be at least 8x8".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rectilinear vertex grid. Vertices are enumerated i-major, then j, then k.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    origin: Vec3,
    spacing: f64,
    dims: [usize; 3],
}

impl Lattice {
    pub fn new(origin: Vec3, spacing: f64, dims: [usize; 3]) -> Result<Self> {
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(Error::InvalidLattice("spacing must be positive".into()));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidLattice(
                "every dimension needs at least 2 vertices".into(),
            ));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidLattice("origin must be finite".into()));
        }
        Ok(Lattice {
            origin,
            spacing,
            dims,
        })
    }

    pub fn origin(&self) -> &Vec3 {
        &self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        debug_assert!((0..3).all(|a| ijk[a] < self.dims[a]));
        (ijk[0] * self.dims[1] + ijk[1]) * self.dims[2] + ijk[2]
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let k = index % self.dims[2];
        let rest = index / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    pub fn position(&self, index: usize) -> Vec3 {
        let [i, j, k] = self.coords(index);
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Far corner of the lattice.
    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ) * self.spacing
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let tol = 1e-9 * self.spacing;
        let hi = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] - tol && p[a] <= hi[a] + tol)
    }

    /// Nearest vertex (clamped into the lattice) and the distance to it.
    pub fn snap(&self, p: &Vec3) -> (usize, f64) {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.spacing).round();
            ijk[a] = t.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        let index = self.index(ijk);
        (index, (self.position(index) - p).norm())
    }

    /// Up to 26 neighbours of a vertex, each with its Euclidean edge length.
    pub fn neighbors(&self, index: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let c = self.coords(index);
        let s = self.spacing;
        const STEPS: [f64; 4] = [0.0, 1.0, std::f64::consts::SQRT_2, 1.732_050_807_568_877_2];
        (0..27usize).filter_map(move |n| {
            if n == 13 {
                return None;
            }
            let d = [n / 9, (n / 3) % 3, n % 3];
            let mut ijk = [0usize; 3];
            let mut moved = 0;
            for a in 0..3 {
                let v = c[a] as isize + d[a] as isize - 1;
                if v < 0 || v >= self.dims[a] as isize {
                    return None;
                }
                if d[a] != 1 {
                    moved += 1;
                }
                ijk[a] = v as usize;
            }
            Some((self.index(ijk), STEPS[moved] * s))
        })
    }

    /// True when two vertices differ by at most one step on every axis.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        let (ca, cb) = (self.coords(a), self.coords(b));
        a != b && (0..3).all(|x| ca[x].abs_diff(cb[x]) <= 1)
    }

    pub fn translated(&self, offset: &Vec3) -> Lattice {
        Lattice {
            origin: self.origin + offset,
            ..*self
        }
    }
}
