//! Truncated signed distance field over the grasping workspace.
//!
//! The workspace is an axis-aligned cube of side `l` with the support plane
//! at z=0 and x,y centered on the origin. The volume frame shifts the
//! workspace corner to the origin, so grid node (i,j,k) sits at world
//! position (i,j,k)*v - (l/2, l/2, 0). Distances are projective (along the
//! camera ray), truncated at tau = 4 voxels and stored normalized to
//! [-1, 1]. Values accumulate in f64 so fusing the same images in any order
//! agrees to well below 1e-9; the on-disk format keeps f32.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion, Vec3};

/// Pinhole camera intrinsics. Pixel (u,v) maps to the camera-frame ray
/// ((u-cx)/fx, (v-cy)/fy, 1); integer pixel coordinates are used directly
/// so doubling resolution and intrinsics reuses rays at even pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            width: 320,
            height: 240,
            fx: 277.13,
            fy: 277.13,
            cx: 160.0,
            cy: 120.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be non-zero"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive and finite"));
        }
        Ok(())
    }

    /// Unit ray through pixel (u,v) in the camera frame.
    pub fn pixel_ray(&self, u: u32, v: u32) -> Vec3 {
        let d = Vec3::new(
            (u as f64 - self.cx) / self.fx,
            (v as f64 - self.cy) / self.fy,
            1.0,
        );
        d.normalized().expect("pixel ray has unit z component")
    }

    /// Nearest-pixel projection of a camera-frame point with z > 0.
    pub fn project(&self, p: Vec3) -> Option<(u32, u32)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = (self.fx * p.x / p.z + self.cx).round();
        let v = (self.fy * p.y / p.z + self.cy).round();
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as u32, v as u32))
    }
}

/// Camera pose looking from `eye` toward `target`: +z along the view
/// direction, +x right, +y down (image convention). A straight-down view is
/// degenerate with the world up vector and falls back to x = world +x.
pub fn look_at(eye: Vec3, target: Vec3) -> Result<Pose> {
    let z = (target - eye)
        .normalized()
        .ok_or_else(|| Error::invalid("look_at eye and target coincide"))?;
    let up = Vec3::new(0.0, 0.0, 1.0);
    let x = match z.cross(up).normalized() {
        Some(x) => x,
        None => Vec3::new(1.0, 0.0, 0.0),
    };
    let y = z.cross(x);
    Ok(Pose::new(Quaternion::from_basis(x, y, z), eye))
}

/// A rendered or captured depth image. Depths are camera-frame z in meters
/// (not ray lengths); 0 marks pixels with no return. `camera_pose` maps
/// camera coordinates into the world.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub intrinsics: CameraIntrinsics,
    pub camera_pose: Pose,
    pub depths: Vec<f32>,
}

impl DepthImage {
    pub fn new(intrinsics: CameraIntrinsics, camera_pose: Pose, depths: Vec<f32>) -> Result<Self> {
        intrinsics.validate()?;
        let expect = intrinsics.width as usize * intrinsics.height as usize;
        if depths.len() != expect {
            return Err(Error::ShapeMismatch {
                expected: vec![expect],
                got: vec![depths.len()],
            });
        }
        if depths.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid("depths must be finite and non-negative"));
        }
        Ok(DepthImage { intrinsics, camera_pose, depths })
    }

    pub fn depth(&self, u: u32, v: u32) -> f32 {
        self.depths[v as usize * self.intrinsics.width as usize + u as usize]
    }
}

const TSDF_MAGIC: &[u8; 4] = b"TSDF";
/// Truncation distance in voxels.
const TRUNCATION_VOXELS: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct TsdfVolume {
    n: usize,
    l: f64,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(n: usize, l: f64) -> Result<Self> {
        if n == 0 || n > 512 {
            return Err(Error::invalid(format!("grid resolution {n} out of range")));
        }
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::invalid(format!("workspace side {l} must be positive")));
        }
        Ok(TsdfVolume {
            n,
            l,
            values: vec![0.0; n * n * n],
            weights: vec![0.0; n * n * n],
        })
    }

    /// Assemble a volume from existing grids (x fastest, then y, then z).
    pub fn from_grids(n: usize, l: f64, values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut volume = TsdfVolume::new(n, l)?;
        if values.len() != n * n * n || weights.len() != n * n * n {
            return Err(Error::ShapeMismatch {
                expected: vec![n * n * n],
                got: vec![values.len(), weights.len()],
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || values.iter().any(|v| !v.is_finite() || v.abs() > 1.0)
        {
            return Err(Error::invalid("grid values outside [-1, 1] or negative weights"));
        }
        volume.values = values;
        volume.weights = weights;
        Ok(volume)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> f64 {
        self.l
    }

    pub fn voxel_size(&self) -> f64 {
        self.l / self.n as f64
    }

    pub fn truncation(&self) -> f64 {
        TRUNCATION_VOXELS * self.voxel_size()
    }

    /// World-to-volume transform: a pure translation moving the workspace
    /// corner (-l/2, -l/2, 0) to the origin.
    pub fn world_to_volume(&self) -> Pose {
        Pose::from_translation(Vec3::new(self.l / 2.0, self.l / 2.0, 0.0))
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.n && j < self.n && k < self.n);
        (k * self.n + j) * self.n + i
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weights[self.index(i, j, k)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// World position of grid node (i,j,k).
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let v = self.voxel_size();
        Vec3::new(
            i as f64 * v - self.l / 2.0,
            j as f64 * v - self.l / 2.0,
            k as f64 * v,
        )
    }

    fn in_workspace(&self, t: Vec3) -> bool {
        let h = self.l / 2.0;
        t.x >= -h && t.x <= h && t.y >= -h && t.y <= h && t.z >= 0.0 && t.z <= self.l
    }

    /// Continuous voxel coordinates of a world-frame grasp. Rounding to a
    /// grid index is a separate, explicit step.
    pub fn world_to_voxel(
        &self,
        t: Vec3,
        r: Quaternion,
        w: f64,
    ) -> Result<(Vec3, Quaternion, f64)> {
        if !self.in_workspace(t) {
            return Err(Error::OutsideWorkspace(t.x, t.y, t.z));
        }
        let v = self.voxel_size();
        let shifted = self.world_to_volume().apply(t);
        Ok((shifted / v, r, w / v))
    }

    /// Inverse of [`world_to_voxel`](Self::world_to_voxel) on continuous
    /// coordinates; exact for round trips.
    pub fn voxel_to_world(&self, t: Vec3, r: Quaternion, w: f64) -> (Vec3, Quaternion, f64) {
        let v = self.voxel_size();
        (self.world_to_volume().inverse().apply(t * v), r, w * v)
    }

    /// Fuse one depth image with a projective running average. Each voxel
    /// projecting onto a valid pixel with signed distance >= -tau receives
    /// an observation of weight 1.
    pub fn integrate(&mut self, image: &DepthImage) -> Result<()> {
        image.intrinsics.validate()?;
        let world_from_cam = image.camera_pose;
        let cam_from_world = world_from_cam.inverse();
        let tau = self.truncation();
        for k in 0..self.n {
            for j in 0..self.n {
                for i in 0..self.n {
                    let p_cam = cam_from_world.apply(self.node_position(i, j, k));
                    let Some((u, v)) = image.intrinsics.project(p_cam) else {
                        continue;
                    };
                    let depth = image.depth(u, v) as f64;
                    if depth <= 0.0 {
                        continue;
                    }
                    let sdf = depth - p_cam.z;
                    if sdf < -tau {
                        continue;
                    }
                    let tsdf = (sdf / tau).clamp(-1.0, 1.0);
                    let idx = self.index(i, j, k);
                    let w = self.weights[idx];
                    self.values[idx] = (self.values[idx] * w + tsdf) / (w + 1.0);
                    self.weights[idx] = w + 1.0;
                }
            }
        }
        Ok(())
    }

    /// Trilinear signed distance in meters at a world point, plus whether
    /// the interpolation neighborhood was actually observed. Unobserved
    /// neighborhoods report the truncation distance.
    pub fn distance_at(&self, point: Vec3) -> Result<(f64, bool)> {
        if !self.in_workspace(point) {
            return Err(Error::OutsideWorkspace(point.x, point.y, point.z));
        }
        let v = self.voxel_size();
        let t = self.world_to_volume().apply(point) / v;
        let max = (self.n - 1) as f64;
        let cl = |x: f64| x.clamp(0.0, max);
        let (tx, ty, tz) = (cl(t.x), cl(t.y), cl(t.z));
        let base = |x: f64| (x.floor() as usize).min(self.n - 2);
        let (i0, j0, k0) = (base(tx), base(ty), base(tz));
        let (fx, fy, fz) = (tx - i0 as f64, ty - j0 as f64, tz - k0 as f64);
        let mut acc = 0.0;
        let mut observed = true;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 0 { 1.0 - fx } else { fx })
                        * (if dj == 0 { 1.0 - fy } else { fy })
                        * (if dk == 0 { 1.0 - fz } else { fz });
                    if w <= 1e-12 {
                        continue;
                    }
                    let idx = self.index(i0 + di, j0 + dj, k0 + dk);
                    if self.weights[idx] == 0.0 {
                        observed = false;
                    }
                    acc += w * self.values[idx];
                }
            }
        }
        if !observed {
            return Ok((self.truncation(), false));
        }
        Ok((acc * self.truncation(), true))
    }

    /// Sample `count` points (with replacement) on the zero level set, each
    /// with a unit normal pointing toward the positive (observed) side.
    pub fn extract_surface_points(
        &self,
        count: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<(Vec3, Vec3)>> {
        let crossings = self.surface_crossings();
        if crossings.is_empty() {
            return Err(Error::NoSurface);
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let pick = crossings[rng.random_range(0..crossings.len())];
            out.push(pick);
        }
        Ok(out)
    }

    /// All zero crossings along grid edges, as (world point, normal) pairs.
    pub fn surface_crossings(&self) -> Vec<(Vec3, Vec3)> {
        let mut out = Vec::new();
        let n = self.n;
        let visit = |i: usize, j: usize, k: usize, di: usize, dj: usize, dk: usize| {
            let a = self.value(i, j, k);
            let wa = self.weight(i, j, k);
            let b = self.value(i + di, j + dj, k + dk);
            let wb = self.weight(i + di, j + dj, k + dk);
            if wa == 0.0 || wb == 0.0 || a * b >= 0.0 {
                return None;
            }
            let t = a / (a - b);
            let frac = Vec3::new(
                i as f64 + t * di as f64,
                j as f64 + t * dj as f64,
                k as f64 + t * dk as f64,
            );
            Some(frac)
        };
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    // Nodes lying exactly on the surface are crossings in
                    // their own right; edge products miss them.
                    if self.weight(i, j, k) > 0.0
                        && self.value(i, j, k) == 0.0
                        && self.has_observed_nonzero_neighbor(i, j, k)
                    {
                        self.push_sample(Vec3::new(i as f64, j as f64, k as f64), &mut out);
                    }
                    for (di, dj, dk) in [(1usize, 0usize, 0usize), (0, 1, 0), (0, 0, 1)] {
                        if i + di >= n || j + dj >= n || k + dk >= n {
                            continue;
                        }
                        if let Some(frac) = visit(i, j, k, di, dj, dk) {
                            self.push_sample(frac, &mut out);
                        }
                    }
                }
            }
        }
        out
    }

    fn has_observed_nonzero_neighbor(&self, i: usize, j: usize, k: usize) -> bool {
        let deltas: [(isize, isize, isize); 6] =
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        deltas.iter().any(|&(di, dj, dk)| {
            let (ni, nj, nk) = (i as isize + di, j as isize + dj, k as isize + dk);
            if ni < 0 || nj < 0 || nk < 0 {
                return false;
            }
            let (ni, nj, nk) = (ni as usize, nj as usize, nk as usize);
            ni < self.n
                && nj < self.n
                && nk < self.n
                && self.weight(ni, nj, nk) > 0.0
                && self.value(ni, nj, nk) != 0.0
        })
    }

    fn push_sample(&self, frac: Vec3, out: &mut Vec<(Vec3, Vec3)>) {
        let Some(normal) = self.gradient_normal(frac) else {
            return;
        };
        let v = self.voxel_size();
        let world = self.world_to_volume().inverse().apply(frac * v);
        out.push((world, normal));
    }

    /// Gradient at fractional grid coordinates: a trilinear blend of
    /// per-node central differences, falling back to one-sided differences
    /// where a neighbor is unobserved or off-grid. The TSDF grows toward
    /// free space, so the gradient already points to the observed side.
    fn gradient_normal(&self, frac: Vec3) -> Option<Vec3> {
        let base = |x: f64| (x.floor().max(0.0) as usize).min(self.n - 2);
        let (i0, j0, k0) = (base(frac.x), base(frac.y), base(frac.z));
        let (fx, fy, fz) = (frac.x - i0 as f64, frac.y - j0 as f64, frac.z - k0 as f64);
        let mut g = Vec3::ZERO;
        for dk in 0..2usize {
            for dj in 0..2usize {
                for di in 0..2usize {
                    let w = (if di == 0 { 1.0 - fx } else { fx })
                        * (if dj == 0 { 1.0 - fy } else { fy })
                        * (if dk == 0 { 1.0 - fz } else { fz });
                    if w <= 1e-12 {
                        continue;
                    }
                    g = g + self.node_gradient(i0 + di, j0 + dj, k0 + dk) * w;
                }
            }
        }
        g.normalized()
    }

    fn node_gradient(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let axis = |c: usize, get: &dyn Fn(usize) -> (f64, f64)| -> f64 {
            let usable = |x: usize| get(x).1 > 0.0;
            let lo = if c > 0 && usable(c - 1) { c - 1 } else { c };
            let hi = if c + 1 < self.n && usable(c + 1) { c + 1 } else { c };
            if lo == hi {
                return 0.0;
            }
            (get(hi).0 - get(lo).0) / (hi - lo) as f64
        };
        Vec3::new(
            axis(i, &|x| (self.value(x, j, k), self.weight(x, j, k))),
            axis(j, &|y| (self.value(i, y, k), self.weight(i, y, k))),
            axis(k, &|z| (self.value(i, j, z), self.weight(i, j, z))),
        )
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TSDF_MAGIC)?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.l as f32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for v in &self.weights {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[0..4] != TSDF_MAGIC {
            return Err(Error::format("tsdf", "bad magic"));
        }
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let l = f32::from_le_bytes(header[8..12].try_into().unwrap()) as f64;
        let mut vol = TsdfVolume::new(n, l)?;
        let count = n * n * n;
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if i < count {
                vol.values[i] = x;
            } else {
                vol.weights[i - count] = x;
            }
        }
        for (v, w) in vol.values.iter().zip(&vol.weights) {
            if !v.is_finite() || !w.is_finite() || *w < 0.0 || v.abs() > 1.0 {
                return Err(Error::format("tsdf", "value or weight out of range"));
            }
        }
        Ok(vol)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}
