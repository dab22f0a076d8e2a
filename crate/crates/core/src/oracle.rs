//! Analytic grasp ground truth: gripper collision checks and a quasi-static
//! antipodal closure test standing in for a full grasp simulation.
//!
//! Execution mirrors what a robot would do: spawn at a pre-grasp pose
//! offset back along the approach axis, advance until the grasp pose is
//! reached or the gripper touches something, then close the jaws where it
//! stopped. Jaw closing is modeled with rays from the finger inner faces;
//! success requires one contact per finger on the same object, each inside
//! the friction cone of its closing direction.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gripper_bodies, mesh_intersects_at, ray_cast, GripperModel, Pose, Quaternion, TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspLabel {
    Success,
    Collision,
    NoContact,
    Slip,
}

impl GraspLabel {
    pub fn is_success(&self) -> bool {
        matches!(self, GraspLabel::Success)
    }
}

/// A finger-object contact found while closing the jaws.
#[derive(Debug, Clone, Copy)]
pub struct Contact {
    pub point: Vec3,
    /// Outward surface normal, facing the approaching finger.
    pub normal: Vec3,
    /// Index of the contacted object in the scene slice.
    pub object: usize,
}

#[derive(Debug, Clone)]
pub struct GraspOutcome {
    pub label: GraspLabel,
    /// Jaw separation when both fingers touch; the commanded width for
    /// collisions (jaws never closed) and zero when nothing was pinched.
    pub width_at_contact: f64,
    pub contacts: Vec<Contact>,
    /// The approach was interrupted by contact before reaching the grasp
    /// pose; the outcome was evaluated where the gripper stopped.
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub gripper: GripperModel,
    /// Contact friction coefficient; the cone half-angle is atan(friction).
    pub friction: f64,
    /// Discretization of the pre-grasp to grasp translation.
    pub approach_steps: usize,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams {
            gripper: GripperModel::default(),
            friction: 0.5,
            approach_steps: 25,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        self.gripper.validate()?;
        if !(self.friction > 0.0 && self.friction.is_finite()) {
            return Err(Error::invalid(format!("friction must be positive, got {}", self.friction)));
        }
        if self.approach_steps == 0 {
            return Err(Error::invalid("approach_steps must be at least 1"));
        }
        Ok(())
    }
}

/// True iff any gripper body at `pose`/`width` overlaps a scene object or
/// dips below the support plane.
pub fn check_gripper_collision(
    scene: &[TriMesh],
    gripper: &GripperModel,
    pose: &Pose,
    width: f64,
) -> Result<bool> {
    let bodies = gripper_bodies(gripper, pose, width)?;
    Ok(bodies_collide(&bodies, Vec3::ZERO, scene))
}

/// Collision test for prebuilt gripper bodies rigidly shifted by `offset`.
/// The approach phase is a pure translation, so one set of posed bodies
/// serves every step.
fn bodies_collide(bodies: &[TriMesh; 3], offset: Vec3, scene: &[TriMesh]) -> bool {
    for b in bodies {
        if b.aabb().min.z + offset.z < -1e-9 {
            return true; // support plane
        }
        for obj in scene {
            if mesh_intersects_at(b, offset, obj) {
                return true;
            }
        }
    }
    false
}

/// Offsets of the closing-ray origins on a finger inner face, as (y, z) in
/// the gripper frame. Symmetric in y so jaw-swap symmetry is exact.
fn closing_ray_offsets(gripper: &GripperModel) -> [(f64, f64); 5] {
    let fd = gripper.finger_depth;
    let lateral = 0.7 * gripper.finger_thickness;
    [
        (0.0, -0.1 * fd),
        (0.0, -0.5 * fd),
        (0.0, -0.9 * fd),
        (lateral, -0.5 * fd),
        (-lateral, -0.5 * fd),
    ]
}

/// First contact reached by a closing finger face, if any lies within the
/// jaw gap.
fn finger_contact(
    scene_refs: &[&TriMesh],
    pose: &Pose,
    width: f64,
    side: f64, // -1 for the left finger, +1 for the right
    gripper: &GripperModel,
) -> Option<Contact> {
    let dir = pose.rotation.rotate(Vec3::new(-side, 0.0, 0.0));
    let mut best: Option<(f64, Contact)> = None;
    for (y, z) in closing_ray_offsets(gripper) {
        let origin = pose.apply(Vec3::new(side * width / 2.0, y, z));
        if let Some(hit) = ray_cast(scene_refs, origin, dir) {
            if hit.distance <= width + 1e-9
                && best.as_ref().is_none_or(|(t, _)| hit.distance < *t)
            {
                best = Some((
                    hit.distance,
                    Contact { point: hit.point, normal: hit.normal, object: hit.mesh },
                ));
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Evaluate one grasp candidate against the scene.
pub fn evaluate_grasp(
    scene: &[TriMesh],
    pose: &Pose,
    initial_width: f64,
    params: &OracleParams,
) -> Result<GraspOutcome> {
    params.validate()?;
    let t = pose.translation;
    let q = pose.rotation;
    if !(t.x.is_finite() && t.y.is_finite() && t.z.is_finite()) || !q.norm().is_finite() {
        return Err(Error::invalid("grasp pose contains non-finite components"));
    }
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "grasp rotation is not a unit quaternion (norm {})",
            q.norm()
        )));
    }
    let gripper = &params.gripper;
    if !(0.0..=gripper.max_width + 1e-12).contains(&initial_width) {
        return Err(Error::invalid(format!(
            "initial width {initial_width} outside [0, {}]",
            gripper.max_width
        )));
    }

    let approach = q.rotate(Vec3::new(0.0, 0.0, 1.0));
    let pre_grasp = t - approach * gripper.finger_depth;
    let bodies = gripper_bodies(gripper, &Pose::new(q, pre_grasp), initial_width)?;

    // March from pre-grasp to grasp; `reached` is the last collision-free
    // offset along the way.
    if bodies_collide(&bodies, Vec3::ZERO, scene) {
        return Ok(GraspOutcome {
            label: GraspLabel::Collision,
            width_at_contact: initial_width,
            contacts: Vec::new(),
            stopped_early: false,
        });
    }
    let steps = params.approach_steps;
    let mut reached = 0usize;
    for k in 1..=steps {
        let offset = approach * (gripper.finger_depth * k as f64 / steps as f64);
        if bodies_collide(&bodies, offset, scene) {
            break;
        }
        reached = k;
    }
    let stopped_early = reached < steps;
    let eval_pose = Pose::new(
        q,
        pre_grasp + approach * (gripper.finger_depth * reached as f64 / steps as f64),
    );

    let scene_refs: Vec<&TriMesh> = scene.iter().collect();
    let left = finger_contact(&scene_refs, &eval_pose, initial_width, -1.0, gripper);
    let right = finger_contact(&scene_refs, &eval_pose, initial_width, 1.0, gripper);
    let mut contacts = Vec::new();
    if let Some(c) = left {
        contacts.push(c);
    }
    if let Some(c) = right {
        contacts.push(c);
    }
    if contacts.len() < 2 {
        return Ok(GraspOutcome {
            label: GraspLabel::NoContact,
            width_at_contact: 0.0,
            contacts,
            stopped_early,
        });
    }

    let closing = q.rotate(Vec3::new(1.0, 0.0, 0.0));
    let s_left = (contacts[0].point - eval_pose.translation).dot(closing);
    let s_right = (contacts[1].point - eval_pose.translation).dot(closing);
    let width_at_contact = (s_right - s_left).clamp(0.0, gripper.max_width);

    // Spanning two different objects cannot produce a stable pinch.
    let mut label = if contacts[0].object == contacts[1].object {
        GraspLabel::Success
    } else {
        GraspLabel::Slip
    };
    // Friction cone: each contact normal must point back at its finger
    // (against the closing motion) within atan(friction).
    let cone_cos = 1.0 / (1.0 + params.friction * params.friction).sqrt();
    for (c, side) in [(contacts[0], -1.0), (contacts[1], 1.0f64)] {
        let toward_finger = closing * side;
        if c.normal.dot(toward_finger) < cone_cos {
            label = GraspLabel::Slip;
        }
        // Closing rays originate between the fingertip plane and the finger
        // root, so contacts always satisfy the depth requirement; keep the
        // guard for future contact models.
        let depth = (c.point - eval_pose.translation).dot(approach);
        if depth < -gripper.finger_depth - 1e-9 || depth > 1e-9 {
            label = GraspLabel::Slip;
        }
    }

    Ok(GraspOutcome {
        label,
        width_at_contact,
        contacts,
        stopped_early,
    })
}

/// Label many candidates in parallel. Results keep candidate order.
pub fn evaluate_candidates(
    scene: &[TriMesh],
    candidates: &[(Pose, f64)],
    params: &OracleParams,
) -> Result<Vec<GraspOutcome>> {
    params.validate()?;
    candidates
        .par_iter()
        .map(|(pose, width)| evaluate_grasp(scene, pose, *width, params))
        .collect()
}

/// Build grasp candidates from surface samples: sink each point into the
/// surface along its normal by a uniform draw so the fingers envelop the
/// local geometry, approach anti-parallel to the normal, and spin the
/// closing axis about the normal in even steps across a half turn.
pub fn sample_candidates(
    points: &[(Vec3, Vec3)],
    gripper: &GripperModel,
    orientations: usize,
    rng: &mut impl Rng,
) -> Vec<(Pose, f64)> {
    let mut out = Vec::with_capacity(points.len() * orientations);
    for &(point, normal) in points {
        let Some(n) = normal.normalized() else {
            continue;
        };
        let u = rng.random_range(0.0..gripper.finger_depth);
        let position = point - n * u;
        let z_axis = -n;
        // Deterministic frame: seed the closing axis from the coordinate
        // axis least aligned with the approach axis.
        let helper = {
            let a = [z_axis.x.abs(), z_axis.y.abs(), z_axis.z.abs()];
            let mut k = 0;
            if a[1] < a[k] {
                k = 1;
            }
            if a[2] < a[k] {
                k = 2;
            }
            Vec3::axis_unit(k)
        };
        let y0 = z_axis.cross(helper).normalized().expect("helper not parallel");
        let x0 = y0.cross(z_axis);
        let base = Quaternion::from_basis(x0, y0, z_axis);
        // A half turn swaps the jaws, so orientations repeat with period pi.
        for k in 0..orientations {
            let angle = std::f64::consts::PI * k as f64 / orientations as f64;
            let spin = Quaternion::from_axis_angle(n, angle);
            out.push((Pose::new(spin * base, position), gripper.max_width));
        }
    }
    out
}
