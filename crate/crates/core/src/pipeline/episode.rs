use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{EpisodeConfig, RefineParams};
use super::metrics::{corridor_eval, eig_gain_percent, safety_measure, CorridorRow, Safety};
use crate::error::{Error, Result};
use crate::nbv::{
    accumulate_prior, build_mask, optimize_yaw, MaskRegion, NbvResult, PriorInfo, StopReason,
};
use crate::planner::{astar, filter_safe, local_partition, plan_segment, PathSegment, SafeSet};
use crate::pnm;
use crate::renderer::{
    refine_map_with, render, render_loss, splat_hessian_diag, RenderedImage, StepSizes,
};
use crate::risk::{build_risk_field, RiskField};
use crate::scene::{
    load_scene, make_pose, save_scene, CameraIntrinsics, Lattice, Pose, Scene, Vec3,
};

/// Folds one observation into the map: the prior gains the view's
/// information at the current estimate, then the estimate is refined
/// against the observation.
pub fn assimilate_view(
    estimate: &Scene,
    prior: &PriorInfo,
    pose: &Pose,
    observation: &RenderedImage,
    cam: &CameraIntrinsics,
    refine: &RefineParams,
) -> Result<(Scene, PriorInfo)> {
    let prior = accumulate_prior(prior, &splat_hessian_diag(estimate, pose, cam))?;
    let views = [(*pose, observation.clone())];
    let step = StepSizes {
        appearance: refine.step_size,
        geometry: refine.geometry_step_size,
    };
    let scene = refine_map_with(
        estimate,
        &views,
        cam,
        refine.steps,
        step,
        refine.depth_weight,
    )?;
    Ok((scene, prior))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Blocked { subgoal: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointRecord {
    pub subgoal: usize,
    pub vertex: usize,
    pub position: [f64; 3],
    pub nominal_yaw: f64,
    pub yaw: f64,
    pub nominal_eig: f64,
    pub optimized_eig: f64,
    pub eig_gain_percent: Option<f64>,
    pub stop_reason: StopReason,
    pub mask_size: usize,
    /// Loss of the estimate against the observation, before and after
    /// assimilation.
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub subgoal: usize,
    pub waypoints: Vec<usize>,
    pub reached_proxy: bool,
    pub fallback: bool,
    pub length: f64,
    pub planning_min_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub seed: u64,
    pub termination: Termination,
    pub waypoints: Vec<WaypointRecord>,
    pub segments: Vec<SegmentRecord>,
    pub executed_length: f64,
    pub baseline_length: f64,
    /// Both paths measured against the ground-truth risk field.
    pub executed_safety: Safety,
    pub baseline_safety: Safety,
    pub mean_eig_gain_percent: Option<f64>,
    pub corridor: Vec<CorridorRow>,
}

impl EpisodeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything an episode produces; the report plus the artifacts behind it.
#[derive(Clone, Debug)]
pub struct Episode {
    pub report: EpisodeReport,
    pub executed: PathSegment,
    pub baseline: PathSegment,
    pub truth_field: RiskField,
    pub traces: Vec<NbvResult>,
    pub observations: Vec<(Pose, RenderedImage)>,
    pub estimate: Scene,
    pub prior: PriorInfo,
}

fn bearing(from: &Vec3, to: &Vec3, fallback: f64) -> f64 {
    let d = to - from;
    if d.x.hypot(d.y) < 1e-9 {
        fallback
    } else {
        d.y.atan2(d.x)
    }
}

/// The safe set `plan_segment` searched, rebuilt for graph distances.
fn planning_safe_set(
    field: &RiskField,
    from: &Vec3,
    to: &Vec3,
    cfg: &EpisodeConfig,
) -> Result<SafeSet> {
    let partition = local_partition(&field.lattice, from, to, cfg.margin)?;
    Ok(filter_safe(field, &partition, cfg.gamma))
}

fn straight_shot(lattice: &Lattice, from: &Vec3, to: &Vec3) -> Result<PathSegment> {
    let all = SafeSet::everything(lattice);
    let (a, _) = lattice.snap(from);
    let (b, _) = lattice.snap(to);
    Ok(astar(&all, a, b)?.expect("the full lattice is connected"))
}

/// Risk-averse planning with next-best-view yaw selection, one subgoal at
/// a time: rebuild α from the estimate, plan a safe segment, choose a yaw
/// at every waypoint, observe the ground truth there and assimilate.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<Episode> {
    cfg.validate()?;
    let gt = load_scene(&cfg.ground_truth)?;
    let mut estimate = load_scene(&cfg.estimate)?;
    if gt.len() != estimate.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            found: estimate.len(),
        });
    }
    let lattice = cfg.lattice.build()?;
    let cam = cfg.camera;
    let plan = cfg.plan_params();
    let reference = cfg.trajectory();
    let mut prior = PriorInfo::new(estimate.len(), cfg.nbv.lambda)?;

    let mut position = reference[0];
    let mut executed: Vec<usize> = Vec::new();
    let mut segments = Vec::new();
    let mut waypoints = Vec::new();
    let mut traces = Vec::new();
    let mut observations = Vec::new();
    let mut eig_stop = 0.0;
    let mut heading = bearing(&reference[0], &reference[1], 0.0);
    let mut termination = Termination::Completed;

    for j in 1..reference.len() {
        let goal = reference[j];
        let field = build_risk_field(&estimate, &lattice, cfg.epsilon)?;
        let segment = match plan_segment(&field, &position, &goal, &plan) {
            Ok(s) => s,
            Err(Error::Blocked(reason)) if j > 1 => {
                termination = Termination::Blocked { subgoal: j, reason };
                break;
            }
            Err(e) => return Err(e),
        };
        let planning_min = segment
            .waypoints
            .iter()
            .map(|&v| field.values[v])
            .fold(f64::INFINITY, f64::min);
        if planning_min < cfg.gamma {
            return Err(Error::Blocked(format!(
                "segment {j} contains a vertex with risk {planning_min} below tolerance"
            )));
        }
        let safe = planning_safe_set(&field, &position, &goal, cfg)?;
        let mask = build_mask(&segment, &field, &estimate, cfg.beta1, cfg.beta2);
        info!(
            "subgoal {j}: {} waypoints, mask of {} splats, proxy={}",
            segment.waypoints.len(),
            mask.len(),
            segment.reached_proxy
        );
        segments.push(SegmentRecord {
            subgoal: j,
            waypoints: segment.waypoints.clone(),
            reached_proxy: segment.reached_proxy,
            fallback: segment.fallback,
            length: segment.total_length,
            planning_min_alpha: planning_min,
        });

        let skip = usize::from(executed.last() == segment.waypoints.first());
        for (k, &v) in segment.waypoints.iter().enumerate().skip(skip) {
            let here = lattice.position(v);
            heading = match segment.waypoints.get(k + 1) {
                Some(&next) => bearing(&here, &lattice.position(next), heading),
                None => reference
                    .get(j + 1)
                    .map_or(heading, |n| bearing(&here, n, heading)),
            };
            let params = cfg.nbv_params(eig_stop);
            let result = optimize_yaw(
                &here, heading, &estimate, &mask, &prior, &safe, &cam, &params,
            )?;
            if waypoints.is_empty() {
                eig_stop = cfg.nbv.eig_stop_fraction * result.nominal_eig;
            }
            let pose = make_pose(here, result.yaw_star)?;
            let observation = render(&gt, &pose, &cam);
            let loss_before = render_loss(
                &render(&estimate, &pose, &cam),
                &observation,
                cfg.refine.depth_weight,
            )?;
            let (next_estimate, next_prior) =
                assimilate_view(&estimate, &prior, &pose, &observation, &cam, &cfg.refine)?;
            estimate = next_estimate;
            prior = next_prior;
            let loss_after = render_loss(
                &render(&estimate, &pose, &cam),
                &observation,
                cfg.refine.depth_weight,
            )?;

            waypoints.push(WaypointRecord {
                subgoal: j,
                vertex: v,
                position: here.into(),
                nominal_yaw: heading,
                yaw: result.yaw_star,
                nominal_eig: result.nominal_eig,
                optimized_eig: result.eig_star,
                eig_gain_percent: eig_gain_percent(result.nominal_eig, result.eig_star),
                stop_reason: result.stop_reason,
                mask_size: mask.len(),
                loss_before,
                loss_after,
            });
            executed.push(v);
            traces.push(result);
            observations.push((pose, observation));
        }
        position = lattice.position(segment.terminal());
    }

    let executed = PathSegment::new(&lattice, executed);
    let baseline = straight_shot(&lattice, &reference[0], &reference[reference.len() - 1])?;
    let truth_field = build_risk_field(&gt, &lattice, cfg.epsilon)?;
    let gains: Vec<f64> = waypoints
        .iter()
        .filter_map(|w: &WaypointRecord| w.eig_gain_percent)
        .collect();
    let corridor = corridor_eval(
        &gt,
        &estimate,
        &executed.points(),
        &cfg.corridor_radii,
        &cam,
        cfg.seed,
    )?;
    let report = EpisodeReport {
        seed: cfg.seed,
        termination,
        executed_length: executed.total_length,
        baseline_length: baseline.total_length,
        executed_safety: safety_measure(&executed, &truth_field),
        baseline_safety: safety_measure(&baseline, &truth_field),
        mean_eig_gain_percent: (!gains.is_empty())
            .then(|| gains.iter().sum::<f64>() / gains.len() as f64),
        waypoints,
        segments,
        corridor,
    };
    Ok(Episode {
        report,
        executed,
        baseline,
        truth_field,
        traces,
        observations,
        estimate,
        prior,
    })
}

impl Episode {
    /// CSV with columns `waypoint,start_id,iter,yaw,eig`.
    pub fn eig_trace_csv(&self) -> String {
        let mut out = String::from("waypoint,start_id,iter,yaw,eig\n");
        for (w, r) in self.traces.iter().enumerate() {
            for t in &r.trace {
                let _ = writeln!(out, "{w},{},{},{},{}", t.start_id, t.iter, t.yaw, t.eig);
            }
        }
        out
    }

    pub fn corridor_csv(&self) -> String {
        let mut out = String::from("radius,psnr,depth_mae\n");
        for r in &self.report.corridor {
            let _ = writeln!(out, "{},{},{}", r.radius, r.psnr, r.depth_mae);
        }
        out
    }

    /// Writes `report.json`, the CSV tables, the final estimate and the
    /// observed frames.
    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let frames = dir.join("frames");
        fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("report.json", self.report.to_json())?;
        write("eig_trace.csv", self.eig_trace_csv())?;
        write("corridor.csv", self.corridor_csv())?;
        self.executed
            .write_csv(&self.truth_field, dir.join("path.csv"))?;
        self.truth_field.write_csv(dir.join("riskfield.csv"))?;
        save_scene(&self.estimate, dir.join("estimate.json"))?;
        for (k, (_, img)) in self.observations.iter().enumerate() {
            pnm::write_color(frames.join(format!("view_{k:03}.ppm")), img)?;
            pnm::write_depth(frames.join(format!("depth_{k:03}.pgm")), img)?;
        }
        Ok(())
    }
}

/// EIG at `samples` evenly spaced yaws for the initial estimate, with the
/// mask reduced to the single ball around `vertex`.
pub fn sweep_yaw(
    cfg: &EpisodeConfig,
    vertex: [usize; 3],
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    let estimate = load_scene(&cfg.estimate)?;
    let lattice = cfg.lattice.build()?;
    let [d0, d1, d2] = lattice.dims();
    if vertex[0] >= d0 || vertex[1] >= d1 || vertex[2] >= d2 {
        return Err(Error::InvalidConfig(format!(
            "waypoint {vertex:?} lies outside lattice {:?}",
            lattice.dims()
        )));
    }
    let v = lattice.index(vertex);
    let field = build_risk_field(&estimate, &lattice, cfg.epsilon)?;
    let all: Vec<usize> = (0..lattice.len()).collect();
    let safe = filter_safe(&field, &all, cfg.gamma);
    let segment = PathSegment::new(&lattice, vec![v]);
    let mask: MaskRegion = build_mask(&segment, &field, &estimate, cfg.beta1, cfg.beta2);
    let prior = PriorInfo::new(estimate.len(), cfg.nbv.lambda)?;
    let position = lattice.position(v);
    let obj = crate::nbv::YawObjective {
        position,
        scene: &estimate,
        mask: &mask,
        prior: &prior,
        weights: crate::nbv::proximity_weights(
            &position,
            &estimate,
            cfg.w_alpha,
            cfg.w_beta,
            &safe,
        ),
        cam: &cfg.camera,
        lambda: cfg.nbv.lambda,
    };
    Ok(obj.sweep(samples))
}
