use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nbv::NbvParams;
use crate::planner::PlanParams;
use crate::scene::{CameraIntrinsics, Lattice, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub origin: [f64; 3],
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl LatticeSpec {
    pub fn build(&self) -> Result<Lattice> {
        Lattice::new(Vec3::from(self.origin), self.spacing, self.dims)
    }
}

/// Yaw optimizer settings as they appear in the config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NbvSpec {
    pub starts: usize,
    pub step: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub batch_fraction: f64,
    pub lambda: f64,
    /// Early-stop threshold as a fraction of the first view's nominal EIG.
    pub eig_stop_fraction: f64,
}

impl Default for NbvSpec {
    fn default() -> Self {
        let d = NbvParams::default();
        NbvSpec {
            starts: d.starts,
            step: d.step,
            max_iters: d.max_iters,
            fd_step: d.fd_step,
            batch_fraction: d.batch_fraction,
            lambda: d.lambda,
            eig_stop_fraction: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    pub steps: usize,
    /// Color and opacity step.
    pub step_size: f64,
    /// Mean and sigma step.
    pub geometry_step_size: f64,
    pub depth_weight: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            steps: 5,
            step_size: 5e-2,
            geometry_step_size: 5e-3,
            depth_weight: 0.5,
        }
    }
}

fn default_delta_retries() -> usize {
    5
}

/// One episode, loaded from TOML. Scene paths are resolved relative to
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub ground_truth: PathBuf,
    pub estimate: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub lattice: LatticeSpec,
    pub trajectory: Vec<[f64; 3]>,
    pub epsilon: f64,
    pub gamma: f64,
    pub margin: f64,
    pub delta: f64,
    #[serde(default = "default_delta_retries")]
    pub delta_retries: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub w_alpha: f64,
    pub w_beta: f64,
    pub camera: CameraIntrinsics,
    #[serde(default)]
    pub nbv: NbvSpec,
    #[serde(default)]
    pub refine: RefineParams,
    pub corridor_radii: Vec<f64>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

impl EpisodeConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<EpisodeConfig> {
        let mut cfg: EpisodeConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: base_dir.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.ground_truth = base_dir.join(&cfg.ground_truth);
        cfg.estimate = base_dir.join(&cfg.estimate);
        cfg.output_dir = cfg.output_dir.map(|d| base_dir.join(d));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EpisodeConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory.len() < 2 {
            return Err(Error::InvalidConfig(
                "trajectory needs at least two waypoints".into(),
            ));
        }
        if self.trajectory.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "trajectory coordinates must be finite".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("margin", self.margin),
            ("delta", self.delta),
            ("beta1", self.beta1),
            ("w_alpha", self.w_alpha),
            ("refine.step_size", self.refine.step_size),
            ("refine.geometry_step_size", self.refine.geometry_step_size),
        ] {
            positive(name, v)?;
        }
        if !(self.beta2 >= 0.0 && self.w_beta >= 0.0 && self.refine.depth_weight >= 0.0) {
            return Err(Error::InvalidConfig(
                "beta2, w_beta and depth_weight must be non-negative".into(),
            ));
        }
        if self.corridor_radii.is_empty() {
            return Err(Error::InvalidConfig("corridor_radii is empty".into()));
        }
        for r in &self.corridor_radii {
            positive("corridor radius", *r)?;
        }
        if self.corridor_radii.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "corridor_radii must be strictly ascending".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.nbv.eig_stop_fraction) {
            return Err(Error::InvalidConfig(
                "nbv.eig_stop_fraction must lie in [0, 1)".into(),
            ));
        }
        self.lattice.build()?;
        self.camera.validate()?;
        self.nbv_params(0.0).validate()
    }

    pub fn trajectory(&self) -> Vec<Vec3> {
        self.trajectory.iter().map(|p| Vec3::from(*p)).collect()
    }

    pub fn plan_params(&self) -> PlanParams {
        PlanParams {
            gamma: self.gamma,
            margin: self.margin,
            delta: self.delta,
            delta_retries: self.delta_retries,
        }
    }

    pub fn nbv_params(&self, eig_stop: f64) -> NbvParams {
        NbvParams {
            starts: self.nbv.starts,
            step: self.nbv.step,
            max_iters: self.nbv.max_iters,
            fd_step: self.nbv.fd_step,
            eig_stop,
            batch_fraction: self.nbv.batch_fraction,
            lambda: self.nbv.lambda,
            w_alpha: self.w_alpha,
            w_beta: self.w_beta,
            seed: self.seed,
        }
    }
}
