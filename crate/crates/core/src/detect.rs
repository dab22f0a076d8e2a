//! Post-process a dense grasp map into a ranked list of world-frame grasps:
//! Gaussian smoothing, feasibility masking, thresholding, and greedy
//! non-maxima suppression.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GripperModel, Quaternion, Vec3};
use crate::neural::{GraspMap, VgnModel};
use crate::volume::TsdfVolume;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Gaussian smoothing width in voxels.
    pub sigma: f64,
    /// Quality threshold; voxels below it are dropped.
    pub epsilon: f64,
    /// Suppression window edge length in voxels, odd.
    pub nms_window: usize,
    pub max_detections: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            sigma: 1.0,
            epsilon: 0.90,
            nms_window: 3,
            max_detections: 32,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("smoothing sigma must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if self.nms_window < 3 || self.nms_window % 2 == 0 {
            return Err(Error::invalid("suppression window must be odd and at least 3"));
        }
        if self.max_detections == 0 {
            return Err(Error::invalid("max detections must be positive"));
        }
        Ok(())
    }
}

/// One executable grasp candidate in the world frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub position: [f64; 3],
    /// Unit quaternion, wxyz.
    pub rotation: [f64; 4],
    /// Commanded opening width in meters.
    pub width: f64,
    pub quality: f64,
    pub voxel: [usize; 3],
}

impl Detection {
    pub fn position_vec(&self) -> Vec3 {
        Vec3::new(self.position[0], self.position[1], self.position[2])
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::new(
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.rotation[3],
        )
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// Separable Gaussian blur with replicated borders.
pub fn smooth_quality(quality: &[f64], n: usize, sigma: f64) -> Result<Vec<f64>> {
    if quality.len() != n * n * n {
        return Err(Error::ShapeMismatch {
            expected: vec![n * n * n],
            got: vec![quality.len()],
        });
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("smoothing sigma must be positive"));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    let clamp = |x: i64| x.clamp(0, n as i64 - 1) as usize;
    let mut a = quality.to_vec();
    let mut b = vec![0.0f64; quality.len()];
    // Pass order x, y, z; the result is symmetric in the order.
    for axis in 0..3 {
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let o = t as i64 - radius;
                        let s = match axis {
                            0 => idx(clamp(i as i64 + o), j, k),
                            1 => idx(i, clamp(j as i64 + o), k),
                            _ => idx(i, j, clamp(k as i64 + o)),
                        };
                        acc += w * a[s];
                    }
                    b[idx(i, j, k)] = acc;
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
    }
    Ok(a)
}

/// Zero the quality of voxels where a grasp cannot close: unobserved cells
/// and cells on or behind the nearest surface.
///
/// The TSDF clips at the truncation distance, which is smaller than the
/// default finger depth, so the threshold is capped at one voxel size to
/// keep the observable outside band selectable.
pub fn mask_quality(
    quality: &mut [f64],
    volume: &TsdfVolume,
    gripper: &GripperModel,
) -> Result<()> {
    let n = volume.n();
    if quality.len() != n * n * n {
        return Err(Error::ShapeMismatch {
            expected: vec![n * n * n],
            got: vec![quality.len()],
        });
    }
    let margin = gripper.finger_depth.min(volume.voxel_size());
    let tau = volume.truncation();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let idx = volume.index(i, j, k);
                if volume.weight(i, j, k) == 0.0 || volume.value(i, j, k) * tau < margin {
                    quality[idx] = 0.0;
                }
            }
        }
    }
    Ok(())
}

/// Threshold and greedy non-maxima suppression: visit voxels by descending
/// quality (ties by ascending linear index), keep a voxel unless a kept one
/// lies within the suppression window, then read off the grasp.
pub fn select_grasps(
    quality: &[f64],
    map: &GraspMap,
    volume: &TsdfVolume,
    gripper: &GripperModel,
    config: &DetectionConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let n = volume.n();
    if quality.len() != n * n * n || map.n != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n * n * n],
            got: vec![quality.len(), map.n * map.n * map.n],
        });
    }
    let mut candidates: Vec<(usize, f64)> = quality
        .iter()
        .enumerate()
        .filter(|(_, q)| **q >= config.epsilon)
        .map(|(i, q)| (i, *q))
        .collect();
    candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let radius = (config.nms_window / 2) as i64;
    let mut suppressed = vec![false; quality.len()];
    let mut detections = Vec::new();
    for (idx, q) in candidates {
        if suppressed[idx] {
            continue;
        }
        let i = idx % n;
        let j = (idx / n) % n;
        let k = idx / (n * n);
        for dk in -radius..=radius {
            let kk = k as i64 + dk;
            if !(0..n as i64).contains(&kk) {
                continue;
            }
            for dj in -radius..=radius {
                let jj = j as i64 + dj;
                if !(0..n as i64).contains(&jj) {
                    continue;
                }
                for di in -radius..=radius {
                    let ii = i as i64 + di;
                    if !(0..n as i64).contains(&ii) {
                        continue;
                    }
                    suppressed[(kk as usize * n + jj as usize) * n + ii as usize] = true;
                }
            }
        }
        let rotation = map.rotation[idx];
        let width_m = map.width[idx] * gripper.max_width;
        let (position, rotation, _) = volume.voxel_to_world(
            Vec3::new(i as f64, j as f64, k as f64),
            rotation,
            0.0,
        );
        detections.push(Detection {
            position: [position.x, position.y, position.z],
            rotation: [rotation.w, rotation.x, rotation.y, rotation.z],
            width: width_m,
            quality: q,
            voxel: [i, j, k],
        });
        if detections.len() >= config.max_detections {
            break;
        }
    }
    Ok(detections)
}

/// Smoothing, masking, thresholding, and suppression in one call.
pub fn post_process(
    map: &GraspMap,
    volume: &TsdfVolume,
    gripper: &GripperModel,
    config: &DetectionConfig,
) -> Result<Vec<Detection>> {
    let mut quality = smooth_quality(&map.quality, map.n, config.sigma)?;
    mask_quality(&mut quality, volume, gripper)?;
    select_grasps(&quality, map, volume, gripper, config)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PlanTiming {
    pub total_ms: f64,
    pub forward_ms: f64,
    pub post_ms: f64,
}

/// Full planning step: network forward pass plus post-processing, with
/// wall-clock timing around exactly that span.
pub fn plan(
    volume: &TsdfVolume,
    model: &VgnModel<f32>,
    gripper: &GripperModel,
    config: &DetectionConfig,
) -> Result<(Vec<Detection>, PlanTiming)> {
    let start = Instant::now();
    let map = model.predict(volume.values(), volume.n())?;
    let after_forward = Instant::now();
    let detections = post_process(&map, volume, gripper, config)?;
    let end = Instant::now();
    let timing = PlanTiming {
        total_ms: end.duration_since(start).as_secs_f64() * 1e3,
        forward_ms: after_forward.duration_since(start).as_secs_f64() * 1e3,
        post_ms: end.duration_since(after_forward).as_secs_f64() * 1e3,
    };
    Ok((detections, timing))
}
