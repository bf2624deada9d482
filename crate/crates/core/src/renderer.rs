//! Forward splatting renderer with analytic parameter Jacobians.
//!
//! Each splat projects to an isotropic screen-space Gaussian centred at the
//! pinhole image of its mean with radius `focal·sigma/depth`. Splats are
//! composited front to back:
//!
//! ```text
//! C = Σ T_i ρ_i c_i        D = Σ T_i ρ_i d_i + T_final·far
//! T_i = Π_{j<i} (1 − ρ_j)  ρ_i = min(opacity_i · exp(−½‖x − u_i‖²/r_i²), MAX_BLEND)
//! ```
//!
//! The rendering function used for Fisher information is the concatenation
//! of the three color channels and the far-normalized depth at every pixel.
//! Partials are taken with the depth ordering held fixed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{camera_transform, CameraIntrinsics, Pose, Scene, Vec3};

/// Upper clamp on the per-pixel blending coefficient.
pub const MAX_BLEND: f64 = 0.999;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Parameters per splat, ordered mu_x, mu_y, mu_z, sigma, opacity, r, g, b.
pub const PARAMS_PER_SPLAT: usize = 8;
/// Footprints are ignored beyond this many screen radii (exp(−40) ≈ 4e−18).
const FOOTPRINT_CUTOFF_SQ: f64 = 80.0;
/// Geometry parameters step at this fraction of the appearance step.
pub const GEOMETRY_STEP_RATIO: f64 = 0.1;
pub const MIN_SIGMA: f64 = 1e-4;

pub type ParamRow = [f64; PARAMS_PER_SPLAT];

/// Partials of the four per-pixel outputs (r, g, b, depth/far) with
/// respect to the eight parameters of one splat.
pub type JacobianBlock = [[f64; PARAMS_PER_SPLAT]; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub splat_index: usize,
    pub center2d: [f64; 2],
    pub radius2d: f64,
    pub depth: f64,
    /// Mean in camera coordinates.
    pub camera_point: Vec3,
}

/// Pinhole projection, or `None` when the splat is culled.
pub fn project_splat(
    splat_index: usize,
    scene: &Scene,
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Option<ProjectedSplat> {
    let splat = &scene.splats()[splat_index];
    let p = camera_transform(pose, &splat.mu);
    let depth = p.z;
    if !(depth > cam.near && depth < cam.far) {
        return None;
    }
    let (cx, cy) = cam.center();
    let u = cx + cam.focal * p.x / depth;
    let v = cy + cam.focal * p.y / depth;
    let radius2d = cam.focal * splat.sigma / depth;
    let reach = 3.0 * radius2d;
    if u + reach < 0.0
        || u - reach > cam.width as f64
        || v + reach < 0.0
        || v - reach > cam.height as f64
    {
        return None;
    }
    Some(ProjectedSplat {
        splat_index,
        center2d: [u, v],
        radius2d,
        depth,
        camera_point: p,
    })
}

/// Visible splats sorted front to back, ties broken by scene order.
pub fn project_scene(scene: &Scene, pose: &Pose, cam: &CameraIntrinsics) -> Vec<ProjectedSplat> {
    let mut proj: Vec<_> = (0..scene.len())
        .filter_map(|i| project_splat(i, scene, pose, cam))
        .collect();
    proj.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.splat_index.cmp(&b.splat_index))
    });
    proj
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub far: f64,
    /// Row-major, one RGB triple per pixel.
    pub color: Vec<[f64; 3]>,
    /// Meters.
    pub depth: Vec<f64>,
    pub final_transmittance: Vec<f64>,
}

impl RenderedImage {
    /// Constant image, useful for metric checks.
    pub fn uniform(width: usize, height: usize, far: f64, color: [f64; 3], depth: f64) -> Self {
        let n = width * height;
        RenderedImage {
            width,
            height,
            far,
            color: vec![color; n],
            depth: vec![depth; n],
            final_transmittance: vec![0.0; n],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &RenderedImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch {
                expected: self.pixel_count(),
                found: other.pixel_count(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Fragment {
    /// Index into the projected list.
    slot: usize,
    rho: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

/// A scene seen from one pose, with projections cached.
struct Frame<'a> {
    scene: &'a Scene,
    cam: &'a CameraIntrinsics,
    axes: [Vec3; 3],
    proj: Vec<ProjectedSplat>,
}

impl<'a> Frame<'a> {
    fn new(scene: &'a Scene, pose: &Pose, cam: &'a CameraIntrinsics) -> Self {
        Frame {
            scene,
            cam,
            axes: pose.axes(),
            proj: project_scene(scene, pose, cam),
        }
    }

    /// Front-to-back fragments at pixel centre (x, y); returns the residual
    /// transmittance.
    fn fragments(&self, x: f64, y: f64, out: &mut Vec<Fragment>) -> f64 {
        out.clear();
        let mut t = 1.0;
        for (slot, p) in self.proj.iter().enumerate() {
            let dx = x - p.center2d[0];
            let dy = y - p.center2d[1];
            let r2 = p.radius2d * p.radius2d;
            let s = (dx * dx + dy * dy) / r2;
            if s > FOOTPRINT_CUTOFF_SQ {
                continue;
            }
            let gauss = (-0.5 * s).exp();
            let raw = self.scene.splats()[p.splat_index].opacity * gauss;
            let (rho, clamped) = if raw > MAX_BLEND {
                (MAX_BLEND, true)
            } else {
                (raw.max(0.0), false)
            };
            out.push(Fragment {
                slot,
                rho,
                gauss,
                clamped,
                transmittance: t,
                dx,
                dy,
            });
            t *= 1.0 - rho;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }

    fn shade(&self, frags: &[Fragment], t_final: f64) -> ([f64; 3], f64) {
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        for f in frags {
            let p = &self.proj[f.slot];
            let w = f.transmittance * f.rho;
            let c = &self.scene.splats()[p.splat_index].color;
            for ch in 0..3 {
                color[ch] += w * c[ch];
            }
            depth += w * p.depth;
        }
        depth += t_final * self.cam.far;
        (color, depth)
    }

    /// Calls `visit(splat_index, block)` for each fragment of the pixel.
    fn jacobians(
        &self,
        frags: &[Fragment],
        t_final: f64,
        mut visit: impl FnMut(usize, &JacobianBlock),
    ) {
        let far = self.cam.far;
        let focal = self.cam.focal;
        let [right, down, fwd] = &self.axes;
        // suffix sums of T_i ρ_i g_i behind each fragment, seeded by the background
        let mut suffix = [0.0, 0.0, 0.0, t_final];
        for f in frags.iter().rev() {
            let p = &self.proj[f.slot];
            let splat = &self.scene.splats()[p.splat_index];
            let g = [splat.color.x, splat.color.y, splat.color.z, p.depth / far];
            let w = f.transmittance * f.rho;
            let mut d_rho = [0.0; 4];
            for o in 0..4 {
                d_rho[o] = f.transmittance * g[o] - suffix[o] / (1.0 - f.rho);
                suffix[o] += w * g[o];
            }

            let (drho_eps, drho_mu, drho_sigma) = if f.clamped {
                (0.0, Vec3::zeros(), 0.0)
            } else {
                let r = p.radius2d;
                let r2 = r * r;
                let du = f.rho * f.dx / r2;
                let dv = f.rho * f.dy / r2;
                let dr = f.rho * (f.dx * f.dx + f.dy * f.dy) / (r2 * r);
                let z = p.depth;
                let cp = &p.camera_point;
                let d_x = du * focal / z;
                let d_y = dv * focal / z;
                let d_z =
                    -(du * focal * cp.x + dv * focal * cp.y + dr * focal * splat.sigma) / (z * z);
                let mu = right * d_x + down * d_y + fwd * d_z;
                (f.gauss, mu, dr * focal / z)
            };

            let mut block = [[0.0; PARAMS_PER_SPLAT]; 4];
            for o in 0..4 {
                let row = &mut block[o];
                for a in 0..3 {
                    row[a] = d_rho[o] * drho_mu[a];
                }
                row[3] = d_rho[o] * drho_sigma;
                row[4] = d_rho[o] * drho_eps;
            }
            for a in 0..3 {
                block[3][a] += w / far * fwd[a];
                block[a][5 + a] = w;
            }
            visit(p.splat_index, &block);
        }
    }

    fn pixel_center(&self, pixel: usize) -> (f64, f64) {
        let w = self.cam.width;
        ((pixel % w) as f64 + 0.5, (pixel / w) as f64 + 0.5)
    }

    /// Sums a per-pixel, per-fragment contribution into per-splat rows.
    /// Rows are reduced in image-row order, so the result is deterministic.
    fn accumulate<F>(&self, contribution: F) -> Vec<ParamRow>
    where
        F: Fn(usize, &JacobianBlock, &mut ParamRow) + Sync,
    {
        let n = self.scene.len();
        let w = self.cam.width;
        let parts: Vec<Vec<ParamRow>> = (0..self.cam.height)
            .into_par_iter()
            .map(|py| {
                let mut acc = vec![[0.0; PARAMS_PER_SPLAT]; n];
                let mut frags = Vec::new();
                for px in 0..w {
                    let pixel = py * w + px;
                    let (x, y) = self.pixel_center(pixel);
                    let t = self.fragments(x, y, &mut frags);
                    self.jacobians(&frags, t, |s, block| {
                        contribution(pixel, block, &mut acc[s])
                    });
                }
                acc
            })
            .collect();
        let mut total = vec![[0.0; PARAMS_PER_SPLAT]; n];
        for part in parts {
            for (t, p) in total.iter_mut().zip(part) {
                for a in 0..PARAMS_PER_SPLAT {
                    t[a] += p[a];
                }
            }
        }
        total
    }
}

pub fn render(scene: &Scene, pose: &Pose, cam: &CameraIntrinsics) -> RenderedImage {
    let frame = Frame::new(scene, pose, cam);
    let w = cam.width;
    let rows: Vec<Vec<([f64; 3], f64, f64)>> = (0..cam.height)
        .into_par_iter()
        .map(|py| {
            let mut frags = Vec::new();
            (0..w)
                .map(|px| {
                    let (x, y) = frame.pixel_center(py * w + px);
                    let t = frame.fragments(x, y, &mut frags);
                    let (c, d) = frame.shade(&frags, t);
                    (c, d, t)
                })
                .collect()
        })
        .collect();
    let n = cam.pixel_count();
    let mut img = RenderedImage {
        width: w,
        height: cam.height,
        far: cam.far,
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        final_transmittance: Vec::with_capacity(n),
    };
    for (c, d, t) in rows.into_iter().flatten() {
        img.color.push(c);
        img.depth.push(d);
        img.final_transmittance.push(t);
    }
    img
}

/// Per-pixel compositing weights `T_i ρ_i` in front-to-back order, for
/// inspecting the blend at a single pixel.
pub fn blend_weights(
    scene: &Scene,
    pose: &Pose,
    cam: &CameraIntrinsics,
    px: usize,
    py: usize,
) -> (Vec<(usize, f64)>, f64) {
    let frame = Frame::new(scene, pose, cam);
    let mut frags = Vec::new();
    let t = frame.fragments(px as f64 + 0.5, py as f64 + 0.5, &mut frags);
    let w = frags
        .iter()
        .map(|f| (frame.proj[f.slot].splat_index, f.transmittance * f.rho))
        .collect();
    (w, t)
}

/// Mean absolute color error plus `depth_weight` times the mean absolute
/// far-normalized depth error.
pub fn render_loss(
    rendered: &RenderedImage,
    target: &RenderedImage,
    depth_weight: f64,
) -> Result<f64> {
    rendered.same_shape(target)?;
    let n = rendered.pixel_count() as f64;
    let mut color = 0.0;
    let mut depth = 0.0;
    for p in 0..rendered.pixel_count() {
        for ch in 0..3 {
            color += (rendered.color[p][ch] - target.color[p][ch]).abs();
        }
        depth += (rendered.depth[p] - target.depth[p]).abs();
    }
    Ok(color / (3.0 * n) + depth_weight * depth / (n * rendered.far))
}

/// Diagonal of `JᵀJ`, one 8-vector per splat.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatHessianDiag {
    pub rows: Vec<ParamRow>,
}

impl SplatHessianDiag {
    pub fn zeros(n: usize) -> Self {
        SplatHessianDiag {
            rows: vec![[0.0; PARAMS_PER_SPLAT]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn splat_hessian_diag(scene: &Scene, pose: &Pose, cam: &CameraIntrinsics) -> SplatHessianDiag {
    let frame = Frame::new(scene, pose, cam);
    let rows = frame.accumulate(|_, block, acc| {
        for row in block {
            for a in 0..PARAMS_PER_SPLAT {
                acc[a] += row[a] * row[a];
            }
        }
    });
    SplatHessianDiag { rows }
}

/// Per-pixel Jacobian blocks for every splat, `[pixel][splat]`, zero where
/// the splat does not contribute. Dense and slow; meant for checks.
pub fn render_jacobian(
    scene: &Scene,
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Vec<Vec<JacobianBlock>> {
    let frame = Frame::new(scene, pose, cam);
    let mut frags = Vec::new();
    (0..cam.pixel_count())
        .map(|pixel| {
            let mut blocks = vec![[[0.0; PARAMS_PER_SPLAT]; 4]; scene.len()];
            let (x, y) = frame.pixel_center(pixel);
            let t = frame.fragments(x, y, &mut frags);
            frame.jacobians(&frags, t, |s, b| blocks[s] = *b);
            blocks
        })
        .collect()
}

/// Loss against `target` and its gradient with respect to every splat
/// parameter. The L1 subgradient at zero residual is zero.
pub fn loss_gradient(
    scene: &Scene,
    pose: &Pose,
    cam: &CameraIntrinsics,
    target: &RenderedImage,
    depth_weight: f64,
) -> Result<(f64, Vec<ParamRow>)> {
    let rendered = render(scene, pose, cam);
    let loss = render_loss(&rendered, target, depth_weight)?;
    let n = rendered.pixel_count() as f64;
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let upstream: Vec<[f64; 4]> = (0..rendered.pixel_count())
        .map(|p| {
            let mut w = [0.0; 4];
            for ch in 0..3 {
                w[ch] = sign(rendered.color[p][ch] - target.color[p][ch]) / (3.0 * n);
            }
            w[3] = depth_weight * sign(rendered.depth[p] - target.depth[p]) / n;
            w
        })
        .collect();
    let frame = Frame::new(scene, pose, cam);
    let grad = frame.accumulate(|pixel, block, acc| {
        let w = &upstream[pixel];
        for (o, row) in block.iter().enumerate() {
            if w[o] != 0.0 {
                for a in 0..PARAMS_PER_SPLAT {
                    acc[a] += w[o] * row[a];
                }
            }
        }
    });
    Ok((loss, grad))
}

/// Separate descent steps for appearance (color, opacity) and geometry
/// (mean, sigma).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub appearance: f64,
    pub geometry: f64,
}

impl StepSizes {
    /// Geometry at `GEOMETRY_STEP_RATIO` of the appearance step.
    pub fn from_appearance(step_size: f64) -> Self {
        StepSizes {
            appearance: step_size,
            geometry: step_size * GEOMETRY_STEP_RATIO,
        }
    }
}

/// Plain gradient descent on the summed loss over `views`. Appearance
/// parameters step by `step_size`, geometry by `GEOMETRY_STEP_RATIO` of it;
/// parameters are projected back into their domains after every step.
pub fn refine_map(
    scene: &Scene,
    views: &[(Pose, RenderedImage)],
    cam: &CameraIntrinsics,
    steps: usize,
    step_size: f64,
    depth_weight: f64,
) -> Result<Scene> {
    refine_map_with(
        scene,
        views,
        cam,
        steps,
        StepSizes::from_appearance(step_size),
        depth_weight,
    )
}

/// [`refine_map`] with independent appearance and geometry steps.
pub fn refine_map_with(
    scene: &Scene,
    views: &[(Pose, RenderedImage)],
    cam: &CameraIntrinsics,
    steps: usize,
    step: StepSizes,
    depth_weight: f64,
) -> Result<Scene> {
    let mut current = scene.clone();
    for _ in 0..steps {
        let mut grad = vec![[0.0; PARAMS_PER_SPLAT]; scene.len()];
        for (pose, target) in views {
            let (_, g) = loss_gradient(&current, pose, cam, target, depth_weight)?;
            for (acc, row) in grad.iter_mut().zip(&g) {
                for a in 0..PARAMS_PER_SPLAT {
                    acc[a] += row[a];
                }
            }
        }
        let (app, geo) = (step.appearance, step.geometry);
        for (s, g) in current.splats_mut().iter_mut().zip(&grad) {
            for a in 0..3 {
                s.mu[a] -= geo * g[a];
                s.color[a] = (s.color[a] - app * g[5 + a]).clamp(0.0, 1.0);
            }
            s.sigma = (s.sigma - geo * g[3]).max(MIN_SIGMA);
            s.opacity = (s.opacity - app * g[4]).clamp(0.0, 1.0);
        }
    }
    Ok(current)
}
