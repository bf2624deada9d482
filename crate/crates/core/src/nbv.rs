//! Risk-masked next-best-view selection.
//!
//! Only splats inside the mask (balls around the planned segment whose radii
//! shrink as the risk field grows safer) count toward the information gain:
//!
//! ```text
//! EIG(ψ) = Σ_{i ∈ mask} Σ_p (v_i · h_ip(ψ) + λ) / prior_ip
//! ```
//!
//! where `h_ip` is the diagonal of `JᵀJ` for the candidate view and `v_i`
//! decays with the graph distance from the camera to the splat. With every
//! matrix diagonal, the trace splits into one term per splat, and so does
//! its yaw gradient.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::TAU;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{PathSegment, SafeSet};
use crate::renderer::{splat_hessian_diag, ParamRow, SplatHessianDiag, PARAMS_PER_SPLAT};
use crate::risk::RiskField;
use crate::scene::{make_pose, wrap_angle, CameraIntrinsics, Lattice, Pose, Scene, Vec3};

/// `β₁ exp(−β₂ α)`.
pub fn mask_radius(alpha: f64, beta1: f64, beta2: f64) -> f64 {
    beta1 * (-beta2 * alpha).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRegion {
    pub centers: Vec<Vec3>,
    pub radii: Vec<f64>,
    /// Ascending splat indices.
    pub member_splats: Vec<usize>,
}

impl MaskRegion {
    pub fn empty() -> Self {
        MaskRegion {
            centers: Vec::new(),
            radii: Vec::new(),
            member_splats: Vec::new(),
        }
    }

    pub fn contains(&self, splat: usize) -> bool {
        self.member_splats.binary_search(&splat).is_ok()
    }

    pub fn len(&self) -> usize {
        self.member_splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_splats.is_empty()
    }
}

/// Union of balls around the segment waypoints; radii read α at each
/// waypoint vertex.
pub fn build_mask(
    segment: &PathSegment,
    field: &RiskField,
    scene: &Scene,
    beta1: f64,
    beta2: f64,
) -> MaskRegion {
    let centers = segment.points();
    let radii: Vec<f64> = segment
        .waypoints
        .iter()
        .map(|&v| mask_radius(field.values[v], beta1, beta2))
        .collect();
    let member_splats = scene
        .splats()
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            centers
                .iter()
                .zip(&radii)
                .any(|(c, &r)| (s.mu - c).norm() <= r)
        })
        .map(|(i, _)| i)
        .collect();
    MaskRegion {
        centers,
        radii,
        member_splats,
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Queued(f64, usize);

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path distances over the safe lattice from one source point.
#[derive(Clone, Debug)]
pub struct GraphDistances {
    lattice: Lattice,
    source: Vec3,
    safe_member: Vec<bool>,
    dist: Vec<f64>,
}

impl GraphDistances {
    pub fn from_point(safe: &SafeSet, source: &Vec3) -> GraphDistances {
        let lattice = *safe.lattice();
        let mut dist = vec![f64::INFINITY; lattice.len()];
        let (start, _) = lattice.snap(source);
        if safe.contains(start) {
            dist[start] = 0.0;
            let mut heap = BinaryHeap::from([Queued(0.0, start)]);
            while let Some(Queued(d, u)) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for (v, w) in safe.neighbors(u) {
                    let nd = d + w;
                    if nd < dist[v] {
                        dist[v] = nd;
                        heap.push(Queued(nd, v));
                    }
                }
            }
        }
        GraphDistances {
            lattice,
            source: *source,
            safe_member: (0..lattice.len()).map(|v| safe.contains(v)).collect(),
            dist,
        }
    }

    /// Graph distance to the vertex nearest `target`, or the Euclidean
    /// distance when either end snaps unsafe or no path exists.
    pub fn to(&self, target: &Vec3) -> f64 {
        let (v, _) = self.lattice.snap(target);
        if self.safe_member[v] && self.dist[v].is_finite() {
            self.dist[v]
        } else {
            (self.source - target).norm()
        }
    }
}

/// `w_alpha · exp(−w_beta · ‖p − μ‖_g)`.
pub fn proximity_weight(pose: &Pose, mu: &Vec3, w_alpha: f64, w_beta: f64, safe: &SafeSet) -> f64 {
    let g = GraphDistances::from_point(safe, pose.position());
    w_alpha * (-w_beta * g.to(mu)).exp()
}

/// Proximity weights for every splat (non-members included) from one
/// camera position.
pub fn proximity_weights(
    position: &Vec3,
    scene: &Scene,
    w_alpha: f64,
    w_beta: f64,
    safe: &SafeSet,
) -> Vec<f64> {
    let g = GraphDistances::from_point(safe, position);
    scene
        .splats()
        .iter()
        .map(|s| w_alpha * (-w_beta * g.to(&s.mu)).exp())
        .collect()
}

/// Diagonal Fisher information accumulated over assimilated views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorInfo {
    pub rows: Vec<ParamRow>,
    pub lambda: f64,
    pub view_count: usize,
}

impl PriorInfo {
    /// `λI` for `n` splats.
    pub fn new(n: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!(
                "prior regularizer must be positive, got {lambda}"
            )));
        }
        Ok(PriorInfo {
            rows: vec![[lambda; PARAMS_PER_SPLAT]; n],
            lambda,
            view_count: 0,
        })
    }

    /// Explicit diagonal; every entry must be positive.
    pub fn from_rows(rows: Vec<ParamRow>, lambda: f64) -> Result<Self> {
        if rows.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("prior entries must be positive".into()));
        }
        Ok(PriorInfo {
            rows,
            lambda,
            view_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

pub fn accumulate_prior(prior: &PriorInfo, view: &SplatHessianDiag) -> Result<PriorInfo> {
    if prior.len() != view.len() {
        return Err(Error::ShapeMismatch {
            expected: prior.len(),
            found: view.len(),
        });
    }
    let rows = prior
        .rows
        .iter()
        .zip(&view.rows)
        .map(|(p, h)| std::array::from_fn(|a| p[a] + h[a]))
        .collect();
    Ok(PriorInfo {
        rows,
        lambda: prior.lambda,
        view_count: prior.view_count + 1,
    })
}

/// Per-splat EIG terms from a precomputed view Hessian. Non-members are 0.
pub fn eig_terms(
    hessian: &SplatHessianDiag,
    mask: &MaskRegion,
    prior: &PriorInfo,
    weights: &[f64],
    lambda: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; hessian.len()];
    for &i in &mask.member_splats {
        let (h, p) = (&hessian.rows[i], &prior.rows[i]);
        out[i] = (0..PARAMS_PER_SPLAT)
            .map(|a| (weights[i] * h[a] + lambda) / p[a])
            .sum();
    }
    out
}

/// Proximity-weighted EIG of a view. `lambda` is the regularizer added to
/// the new-view Hessian; `weights` holds one entry per scene splat.
pub fn eig(
    pose: &Pose,
    scene: &Scene,
    mask: &MaskRegion,
    prior: &PriorInfo,
    weights: &[f64],
    cam: &CameraIntrinsics,
    lambda: f64,
) -> f64 {
    let h = splat_hessian_diag(scene, pose, cam);
    let mut total = 0.0;
    for &i in &mask.member_splats {
        for a in 0..PARAMS_PER_SPLAT {
            total += (weights[i] * h.rows[i][a] + lambda) / prior.rows[i][a];
        }
    }
    total
}

/// The per-splat decomposition of [`eig`]; entries sum to it.
pub fn eig_per_splat(
    pose: &Pose,
    scene: &Scene,
    mask: &MaskRegion,
    prior: &PriorInfo,
    weights: &[f64],
    cam: &CameraIntrinsics,
    lambda: f64,
) -> Vec<f64> {
    eig_terms(
        &splat_hessian_diag(scene, pose, cam),
        mask,
        prior,
        weights,
        lambda,
    )
}

/// Diagonal Loewner order: `A ⪰ B` iff every entry of `A − B` is ≥ 0.
pub fn loewner_geq(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).all(|(x, y)| x - y >= 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbvParams {
    pub starts: usize,
    /// Base ascent step, radians per unit of relative gradient.
    pub step: f64,
    pub max_iters: usize,
    pub fd_step: f64,
    pub eig_stop: f64,
    pub batch_fraction: f64,
    /// Regularizer added to the new-view Hessian.
    pub lambda: f64,
    pub w_alpha: f64,
    pub w_beta: f64,
    pub seed: u64,
}

impl Default for NbvParams {
    fn default() -> Self {
        NbvParams {
            starts: 8,
            step: 0.2,
            max_iters: 20,
            fd_step: 0.01,
            eig_stop: 0.0,
            batch_fraction: 1.0,
            lambda: 1e-6,
            w_alpha: 1.0,
            w_beta: 1.1,
            seed: 0,
        }
    }
}

impl NbvParams {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 {
            return Err(Error::InvalidConfig("nbv starts must be positive".into()));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "batch_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(self.fd_step > 0.0 && self.step > 0.0) {
            return Err(Error::InvalidConfig(
                "fd_step and step must be positive".into(),
            ));
        }
        if !(self.w_alpha > 0.0 && self.w_beta >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(
                "need w_alpha > 0, w_beta >= 0, lambda >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    EarlyInfoStop,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub start_id: usize,
    pub iter: usize,
    pub yaw: f64,
    pub eig: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbvResult {
    pub yaw_star: f64,
    pub eig_star: f64,
    /// EIG at the nominal yaw (start 0, iteration 0).
    pub nominal_eig: f64,
    pub trace: Vec<TraceEntry>,
    pub stop_reason: StopReason,
}

impl NbvResult {
    /// CSV with columns `start_id,iter,yaw,eig`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("start_id,iter,yaw,eig\n");
        for t in &self.trace {
            let _ = writeln!(out, "{},{},{},{}", t.start_id, t.iter, t.yaw, t.eig);
        }
        out
    }
}

/// EIG as a function of yaw alone, at a fixed camera position.
pub struct YawObjective<'a> {
    pub position: Vec3,
    pub scene: &'a Scene,
    pub mask: &'a MaskRegion,
    pub prior: &'a PriorInfo,
    pub weights: Vec<f64>,
    pub cam: &'a CameraIntrinsics,
    pub lambda: f64,
}

impl<'a> YawObjective<'a> {
    fn pose(&self, yaw: f64) -> Pose {
        make_pose(self.position, yaw).expect("finite pose")
    }

    pub fn eig(&self, yaw: f64) -> f64 {
        eig(
            &self.pose(yaw),
            self.scene,
            self.mask,
            self.prior,
            &self.weights,
            self.cam,
            self.lambda,
        )
    }

    pub fn terms(&self, yaw: f64) -> Vec<f64> {
        eig_per_splat(
            &self.pose(yaw),
            self.scene,
            self.mask,
            self.prior,
            &self.weights,
            self.cam,
            self.lambda,
        )
    }

    /// Central-difference yaw derivative of each splat's EIG term,
    /// `v_i ∇ψ 𝓘_i`, in mask order.
    pub fn term_gradients(&self, yaw: f64, fd_step: f64) -> Vec<f64> {
        let plus = self.terms(yaw + fd_step);
        let minus = self.terms(yaw - fd_step);
        self.mask
            .member_splats
            .iter()
            .map(|&i| (plus[i] - minus[i]) / (2.0 * fd_step))
            .collect()
    }

    /// `(yaw, eig)` at `n` evenly spaced yaws starting from −π.
    pub fn sweep(&self, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .into_par_iter()
            .map(|k| {
                let yaw = wrap_angle(-std::f64::consts::PI + TAU * k as f64 / n as f64);
                (yaw, self.eig(yaw))
            })
            .collect()
    }
}

/// Importance sampler for the decomposed gradient: draws masked splats with
/// probability proportional to their proximity weight and reweights by the
/// inverse probability, so the estimate is unbiased.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    probs: Vec<f64>,
    draw: Option<WeightedIndex<f64>>,
    batch: usize,
}

impl BatchSampler {
    /// `weights` in mask order.
    pub fn new(weights: &[f64], fraction: f64) -> BatchSampler {
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = if total > 0.0 {
            weights.iter().map(|w| w / total).collect()
        } else {
            vec![1.0 / weights.len().max(1) as f64; weights.len()]
        };
        let draw = WeightedIndex::new(&probs).ok();
        let batch = ((fraction * weights.len() as f64).ceil() as usize).max(1);
        BatchSampler { probs, draw, batch }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Unbiased estimate of `Σ grads` from one mini-batch.
    pub fn estimate(&self, grads: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let Some(draw) = &self.draw else {
            return 0.0;
        };
        let mut sum = 0.0;
        for _ in 0..self.batch {
            let i = draw.sample(rng);
            sum += grads[i] / self.probs[i];
        }
        sum / self.batch as f64
    }
}

const CONVERGED_STEP: f64 = 1e-4;
const MAX_STEP: f64 = std::f64::consts::FRAC_PI_2;
const BACKTRACKS: usize = 8;

struct StartOutcome {
    trace: Vec<TraceEntry>,
    reason: StopReason,
}

fn ascend(
    obj: &YawObjective,
    start_id: usize,
    yaw0: f64,
    params: &NbvParams,
    sampler: &BatchSampler,
) -> StartOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(
        params.seed ^ (start_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut yaw = wrap_angle(yaw0);
    let mut value = obj.eig(yaw);
    let mut trace = vec![TraceEntry {
        start_id,
        iter: 0,
        yaw,
        eig: value,
    }];
    let mut reason = StopReason::MaxIters;
    for iter in 1..=params.max_iters {
        if value < params.eig_stop {
            reason = StopReason::EarlyInfoStop;
            break;
        }
        let grads = obj.term_gradients(yaw, params.fd_step);
        let g = if params.batch_fraction < 1.0 {
            sampler.estimate(&grads, &mut rng)
        } else {
            grads.iter().sum()
        };
        // ascent on log-EIG: the step is invariant to the scale of the prior
        let scale = if value > 0.0 { 1.0 / value } else { 1.0 };
        let mut delta = (params.step * g * scale).clamp(-MAX_STEP, MAX_STEP);
        let mut accepted = None;
        for _ in 0..BACKTRACKS {
            if delta.abs() < CONVERGED_STEP {
                break;
            }
            let cand = wrap_angle(yaw + delta);
            let v = obj.eig(cand);
            if v > value {
                accepted = Some((cand, v));
                break;
            }
            delta *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            reason = StopReason::Converged;
            break;
        };
        yaw = cand;
        value = v;
        trace.push(TraceEntry {
            start_id,
            iter,
            yaw,
            eig: value,
        });
        if delta.abs() < CONVERGED_STEP {
            reason = StopReason::Converged;
            break;
        }
    }
    StartOutcome { trace, reason }
}

/// Multi-start projected gradient ascent on the circle. Start 0 is the
/// nominal yaw; the others are spaced evenly around it. Returns the best
/// yaw seen anywhere in the trace.
#[allow(clippy::too_many_arguments)]
pub fn optimize_yaw(
    waypoint: &Vec3,
    nominal_yaw: f64,
    scene: &Scene,
    mask: &MaskRegion,
    prior: &PriorInfo,
    safe: &SafeSet,
    cam: &CameraIntrinsics,
    params: &NbvParams,
) -> Result<NbvResult> {
    params.validate()?;
    let nominal_yaw = wrap_angle(nominal_yaw);
    if mask.is_empty() {
        return Ok(NbvResult {
            yaw_star: nominal_yaw,
            eig_star: 0.0,
            nominal_eig: 0.0,
            trace: vec![TraceEntry {
                start_id: 0,
                iter: 0,
                yaw: nominal_yaw,
                eig: 0.0,
            }],
            stop_reason: StopReason::EarlyInfoStop,
        });
    }
    let weights = proximity_weights(waypoint, scene, params.w_alpha, params.w_beta, safe);
    let obj = YawObjective {
        position: *waypoint,
        scene,
        mask,
        prior,
        weights,
        cam,
        lambda: params.lambda,
    };
    let member_weights: Vec<f64> = mask.member_splats.iter().map(|&i| obj.weights[i]).collect();
    let sampler = BatchSampler::new(&member_weights, params.batch_fraction);
    let outcomes: Vec<StartOutcome> = (0..params.starts)
        .into_par_iter()
        .map(|s| {
            ascend(
                &obj,
                s,
                nominal_yaw + TAU * s as f64 / params.starts as f64,
                params,
                &sampler,
            )
        })
        .collect();

    let mut best: Option<(TraceEntry, StopReason)> = None;
    for o in &outcomes {
        for t in &o.trace {
            if best.is_none_or(|(b, _)| t.eig > b.eig) {
                best = Some((*t, o.reason));
            }
        }
    }
    let (best, reason) = best.expect("every start records its first evaluation");
    let nominal_eig = outcomes[0].trace[0].eig;
    Ok(NbvResult {
        yaw_star: best.yaw,
        eig_star: best.eig,
        nominal_eig,
        trace: outcomes.into_iter().flat_map(|o| o.trace).collect(),
        stop_reason: reason,
    })
}
