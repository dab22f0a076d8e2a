//! Simulated clutter-removal benchmark: scenes observed from a fixed camera
//! ring, grasps planned from the fused TSDF, executed by the analytic
//! oracle, and scored per round.
//!
//! A round runs plan / select / execute until the table is empty, the
//! planner comes up empty-handed, or two attempts in a row fail. Successful
//! grasps delete the held object; nothing else moves, so neighbors stay
//! where they settled.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;

use crate::detect::{plan, Detection, DetectionConfig, PlanTiming};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::geometry::{Pose, Vec3};
use crate::neural::VgnModel;
use crate::oracle::{evaluate_grasp, GraspLabel, OracleParams};
use crate::scene::{
    generate_packed_with_count, generate_pile_with_count, render_depth, ObjectPool, PoolKinds,
    SceneGenParams, ViewpointSample,
};
use crate::volume::{CameraIntrinsics, TsdfVolume};

/// Height of the observation camera ring above the support plane.
pub const CAMERA_RING_HEIGHT: f64 = 0.50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Pile of plain boxes.
    BlocksPile,
    /// Pile drawn from the full primitive mix.
    Pile,
    /// Upright objects standing side by side.
    Packed,
}

impl Scenario {
    pub fn pool_kinds(self) -> PoolKinds {
        match self {
            Scenario::BlocksPile => PoolKinds::BlocksOnly,
            Scenario::Pile | Scenario::Packed => PoolKinds::All,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::BlocksPile => "blocks-pile",
            Scenario::Pile => "pile",
            Scenario::Packed => "packed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectPolicy {
    /// Uniform draw over the surviving detections. Avoids hammering a single
    /// false positive across retries.
    RandomAboveEps,
    /// Top-ranked by predicted quality.
    MaxQuality,
    /// Highest grasp position in the world frame.
    HighestZ,
}

impl SelectPolicy {
    pub fn label(self) -> &'static str {
        match self {
            SelectPolicy::RandomAboveEps => "random_above_eps",
            SelectPolicy::MaxQuality => "max_quality",
            SelectPolicy::HighestZ => "highest_z",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchParams {
    pub scenario: Scenario,
    /// Objects per scene before placement rejections.
    pub object_count: usize,
    pub rounds: usize,
    pub policy: SelectPolicy,
    pub seed: u64,
    pub grid_n: usize,
    /// Distinct shapes available to each round's scene draw.
    pub pool_size: usize,
    pub detection: DetectionConfig,
    pub oracle: OracleParams,
    pub scene: SceneGenParams,
    pub intrinsics: CameraIntrinsics,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            scenario: Scenario::Pile,
            object_count: 5,
            rounds: 50,
            policy: SelectPolicy::RandomAboveEps,
            seed: 1,
            grid_n: 40,
            pool_size: 40,
            detection: DetectionConfig::default(),
            oracle: OracleParams::default(),
            scene: SceneGenParams::default(),
            intrinsics: CameraIntrinsics::default(),
        }
    }
}

impl BenchParams {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.pool_size == 0 {
            return Err(Error::invalid("pool_size must be at least 1"));
        }
        // Packed placement rejects most draws beyond a handful of upright
        // objects; dense scenes only make sense as piles.
        if self.scenario == Scenario::Packed && self.object_count >= 10 {
            return Err(Error::invalid(format!(
                "packed scenes support fewer than 10 objects, got {}",
                self.object_count
            )));
        }
        self.detection.validate()?;
        self.oracle.validate()?;
        self.intrinsics.validate()?;
        Ok(())
    }

    /// Hash of the full parameter set, stamped into reports so result files
    /// can be traced back to their configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("bench params serialize");
        let mut h = Sha256::new();
        h.update(&json);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One executed grasp within a round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub grasp: Detection,
    pub outcome: GraspLabel,
    /// Wall-clock planning time for the attempt, volume in to grasp list
    /// out. Excluded from reproducibility comparisons.
    pub planning_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Every object was removed.
    Cleared,
    /// The planner returned no detections.
    NoGrasp,
    /// Two attempts in a row failed.
    TwoFailures,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    pub scenario: Scenario,
    pub m: usize,
    pub attempts: Vec<AttemptRecord>,
    pub objects_initial: usize,
    pub objects_removed: usize,
    pub termination: Termination,
}

impl RoundResult {
    /// Copy with wall-clock fields zeroed, for bit-identical comparisons.
    pub fn without_timing(&self) -> RoundResult {
        let mut out = self.clone();
        for a in &mut out.attempts {
            a.planning_ms = 0.0;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scenario: Scenario,
    pub m: usize,
    pub epsilon: f64,
    pub policy: SelectPolicy,
    pub rounds: usize,
    pub attempts: usize,
    pub successes: usize,
    /// Successful grasps over executed grasps, in percent.
    pub success_rate: f64,
    /// Objects removed over objects placed, pooled across rounds, percent.
    pub percent_cleared: f64,
    pub mean_planning_ms: f64,
    pub p50_planning_ms: f64,
    pub p99_planning_ms: f64,
    pub config_hash: String,
}

impl BenchmarkReport {
    /// Copy with wall-clock fields zeroed, for bit-identical comparisons.
    pub fn without_timing(&self) -> BenchmarkReport {
        BenchmarkReport {
            mean_planning_ms: 0.0,
            p50_planning_ms: 0.0,
            p99_planning_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Six cameras on a ring of half the workspace width, 0.50 m above the
/// support plane, sixty degrees apart, all aimed at the workspace center.
pub fn benchmark_views(l: f64) -> Result<Vec<ViewpointSample>> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::invalid(format!(
            "workspace side must be positive, got {l}"
        )));
    }
    let target = Vec3::new(0.0, 0.0, l / 2.0);
    let ring = l / 2.0;
    let rise = CAMERA_RING_HEIGHT - target.z;
    Ok((0..6)
        .map(|k| ViewpointSample {
            radius: ring.hypot(rise),
            theta: ring.atan2(rise),
            phi: std::f64::consts::TAU * k as f64 / 6.0,
            target,
        })
        .collect())
}

/// Pick one detection under the given policy; `None` signals the planner
/// found nothing and the round must stop.
pub fn select_policy(
    detections: &[Detection],
    policy: SelectPolicy,
    rng: &mut impl Rng,
) -> Option<Detection> {
    if detections.is_empty() {
        return None;
    }
    let pick = match policy {
        SelectPolicy::RandomAboveEps => rng.random_range(0..detections.len()),
        SelectPolicy::MaxQuality => argmax_by(detections, |d| d.quality),
        SelectPolicy::HighestZ => argmax_by(detections, |d| d.position[2]),
    };
    Some(detections[pick].clone())
}

fn argmax_by(detections: &[Detection], key: impl Fn(&Detection) -> f64) -> usize {
    let mut best = 0;
    for i in 1..detections.len() {
        if key(&detections[i]) > key(&detections[best]) {
            best = i;
        }
    }
    best
}

/// One clutter-removal round against the trained network.
pub fn run_round(params: &BenchParams, model: &VgnModel<f32>, round: usize) -> Result<RoundResult> {
    let gripper = params.oracle.gripper;
    let mut planner = |volume: &TsdfVolume| plan(volume, model, &gripper, &params.detection);
    run_round_with_planner(params, &mut planner, round)
}

/// Deterministic scene for a round, along with the round's RNG positioned
/// after the scene draws. Selection randomness continues the same stream.
pub fn round_scene(
    params: &BenchParams,
    round: usize,
) -> Result<(crate::scene::SceneDescription, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ round as u64);
    let pool_seed: u64 = rng.random();
    let scene_seed: u64 = rng.random();
    let pool = ObjectPool::generate(pool_seed, params.pool_size, params.scenario.pool_kinds())?;
    let scene = match params.scenario {
        Scenario::Packed => {
            generate_packed_with_count(scene_seed, &pool, &params.scene, params.object_count)?
        }
        Scenario::BlocksPile | Scenario::Pile => {
            generate_pile_with_count(scene_seed, &pool, &params.scene, params.object_count)?
        }
    };
    Ok((scene, rng))
}

/// Round loop with the planner abstracted away, so the mechanics can be
/// exercised against detectors with known behavior.
pub fn run_round_with_planner(
    params: &BenchParams,
    planner: &mut dyn FnMut(&TsdfVolume) -> Result<(Vec<Detection>, PlanTiming)>,
    round: usize,
) -> Result<RoundResult> {
    let (scene, mut rng) = round_scene(params, round)?;
    let mut meshes = scene.meshes()?;
    let objects_initial = meshes.len();
    let views = benchmark_views(params.scene.workspace_side)?;

    let mut attempts = Vec::new();
    let mut removed = 0usize;
    let mut consecutive_failures = 0usize;
    let termination = loop {
        if meshes.is_empty() {
            break Termination::Cleared;
        }
        let mut volume = TsdfVolume::new(params.grid_n, params.scene.workspace_side)?;
        for view in &views {
            let image = render_depth(&meshes, &view.camera_pose()?, &params.intrinsics)?;
            volume.integrate(&image)?;
        }
        let (detections, timing) = planner(&volume)?;
        let Some(choice) = select_policy(&detections, params.policy, &mut rng) else {
            break Termination::NoGrasp;
        };
        let pose = Pose::new(choice.quaternion(), choice.position_vec());
        let outcome = evaluate_grasp(&meshes, &pose, gripper_width(params), &params.oracle)?;
        let success = outcome.label.is_success();
        attempts.push(AttemptRecord {
            grasp: choice,
            outcome: outcome.label,
            planning_ms: timing.total_ms,
        });
        if success {
            // Success guarantees two contacts on one object.
            meshes.remove(outcome.contacts[0].object);
            removed += 1;
            consecutive_failures = 0;
        } else {
            consecutive_failures += 1;
            if consecutive_failures >= 2 {
                break Termination::TwoFailures;
            }
        }
    };
    Ok(RoundResult {
        round,
        scenario: params.scenario,
        m: params.object_count,
        attempts,
        objects_initial,
        objects_removed: removed,
        termination,
    })
}

/// Grasps execute from jaws fully open, matching how the training labels
/// were produced; the predicted width is recorded but not commanded.
fn gripper_width(params: &BenchParams) -> f64 {
    params.oracle.gripper.max_width
}

/// Fold per-round results into the headline metrics.
pub fn aggregate(params: &BenchParams, rounds: &[RoundResult]) -> Result<BenchmarkReport> {
    if rounds.is_empty() {
        return Err(Error::Empty("benchmark rounds"));
    }
    let mut attempts = 0usize;
    let mut successes = 0usize;
    let mut total_initial = 0usize;
    let mut total_removed = 0usize;
    let mut times: Vec<f64> = Vec::new();
    for r in rounds {
        attempts += r.attempts.len();
        successes += r.attempts.iter().filter(|a| a.outcome.is_success()).count();
        total_initial += r.objects_initial;
        total_removed += r.objects_removed;
        times.extend(r.attempts.iter().map(|a| a.planning_ms));
    }
    times.sort_by(f64::total_cmp);
    let success_rate = if attempts == 0 {
        0.0
    } else {
        100.0 * successes as f64 / attempts as f64
    };
    let percent_cleared = if total_initial == 0 {
        100.0
    } else {
        100.0 * total_removed as f64 / total_initial as f64
    };
    let mean = if times.is_empty() {
        0.0
    } else {
        times.iter().sum::<f64>() / times.len() as f64
    };
    Ok(BenchmarkReport {
        scenario: params.scenario,
        m: params.object_count,
        epsilon: params.detection.epsilon,
        policy: params.policy,
        rounds: rounds.len(),
        attempts,
        successes,
        success_rate,
        percent_cleared,
        mean_planning_ms: mean,
        p50_planning_ms: percentile(&times, 50.0),
        p99_planning_ms: percentile(&times, 99.0),
        config_hash: params.config_hash(),
    })
}

/// Nearest-rank percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Run every round in the worker pool and merge results by round index.
pub fn run_benchmark(
    params: &BenchParams,
    model: &VgnModel<f32>,
) -> Result<(BenchmarkReport, Vec<RoundResult>)> {
    params.validate()?;
    let mut rounds = (0..params.rounds)
        .into_par_iter()
        .map(|i| run_round(params, model, i))
        .collect::<Result<Vec<_>>>()?;
    rounds.sort_by_key(|r| r.round);
    let report = aggregate(params, &rounds)?;
    Ok((report, rounds))
}

pub fn write_report_json(path: &Path, report: &BenchmarkReport) -> Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, report)
            .map_err(|e| Error::format("benchmark report", e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn write_report_csv(path: &Path, report: &BenchmarkReport) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(
            w,
            "scenario,m,epsilon,policy,success_rate,percent_cleared,mean_planning_ms,p99_planning_ms,rounds"
        )?;
        writeln!(
            w,
            "{},{},{},{},{:.2},{:.2},{:.3},{:.3},{}",
            report.scenario.label(),
            report.m,
            report.epsilon,
            report.policy.label(),
            report.success_rate,
            report.percent_cleared,
            report.mean_planning_ms,
            report.p99_planning_ms,
            report.rounds
        )?;
        Ok(())
    })
}

/// Per-round log, one JSON object per line, ordered by round index.
pub fn write_round_log(path: &Path, rounds: &[RoundResult]) -> Result<()> {
    atomic_write(path, |w| {
        for r in rounds {
            serde_json::to_writer(&mut *w, r)
                .map_err(|e| Error::format("round log", e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}
