use serde::{Deserialize, Serialize};

use super::{Pose, TriMesh, Vec3};
use crate::error::{Error, Result};

/// Parallel-jaw gripper dimensions in meters.
///
/// The gripper frame sits at the fingertip midpoint with +z pointing along
/// the approach direction and x along the closing axis. Finger interiors
/// span z in [-finger_depth, 0]; the palm sits behind them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GripperModel {
    pub max_width: f64,
    pub finger_depth: f64,
    pub finger_thickness: f64,
    pub palm_depth: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        GripperModel {
            max_width: 0.08,
            finger_depth: 0.05,
            finger_thickness: 0.01,
            palm_depth: 0.02,
        }
    }
}

impl GripperModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("max_width", self.max_width),
            ("finger_depth", self.finger_depth),
            ("finger_thickness", self.finger_thickness),
            ("palm_depth", self.palm_depth),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!(
                    "gripper {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Collision bodies for the gripper opened to `width`, posed in world
/// coordinates: `[left finger, right finger, palm]`. Left is the finger on
/// the -x side of the gripper frame.
pub fn gripper_bodies(model: &GripperModel, pose: &Pose, width: f64) -> Result<[TriMesh; 3]> {
    model.validate()?;
    if !width.is_finite() || width < 0.0 || width > model.max_width {
        return Err(Error::invalid(format!(
            "grasp width {width} outside [0, {}]",
            model.max_width
        )));
    }
    let ft = model.finger_thickness;
    let fy = 2.0 * ft;
    let finger = TriMesh::box_mesh(ft, fy, model.finger_depth)?;
    let palm = TriMesh::box_mesh(model.max_width + 2.0 * ft, fy, model.palm_depth)?;

    // Inner faces at x = +-width/2, finger bodies spanning z in [-fd, 0].
    let half = width / 2.0 + ft / 2.0;
    let fz = -model.finger_depth / 2.0;
    let left = finger
        .translated(Vec3::new(-half, 0.0, fz))
        .transformed(pose);
    let right = finger
        .translated(Vec3::new(half, 0.0, fz))
        .transformed(pose);
    let palm = palm
        .translated(Vec3::new(
            0.0,
            0.0,
            -model.finger_depth - model.palm_depth / 2.0,
        ))
        .transformed(pose);
    Ok([left, right, palm])
}
