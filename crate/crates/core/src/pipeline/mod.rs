//! Episode orchestration, view assimilation and metrics.

mod config;
mod episode;
mod metrics;

pub use config::{EpisodeConfig, LatticeSpec, NbvSpec, RefineParams};
pub use episode::{
    assimilate_view, run_episode, sweep_yaw, Episode, EpisodeReport, SegmentRecord, Termination,
    WaypointRecord,
};
pub use metrics::{
    corridor_eval, depth_mae, eig_gain_percent, psnr, safety_measure, CorridorRow, Safety,
    CORRIDOR_SAMPLES, PSNR_CAP,
};
