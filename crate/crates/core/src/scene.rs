//! Procedural clutter: object pools, pile and packed scene generation, and
//! synthetic depth rendering.
//!
//! Settling is quasi-static. A dropped object descends along -z to first
//! contact, then the locally stable orientation with the lowest center of
//! mass is chosen from a fixed 26-direction candidate set. There is no
//! dynamics; the grasp labels downstream are quasi-static as well, so
//! generation and evaluation stay consistent.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mesh_intersects_at, Aabb, Pose, Quaternion, TriMesh, Vec3};
use crate::volume::{look_at, CameraIntrinsics, DepthImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Box,
    Cylinder,
    Sphere,
    CappedStack,
    LBlock,
}

impl PrimitiveKind {
    /// Build the unit-posed mesh for this kind, centered on its bounding
    /// box center.
    pub fn build(&self, dims: &[f64]) -> Result<TriMesh> {
        let need = |n: usize| -> Result<()> {
            if dims.len() != n {
                return Err(Error::invalid(format!(
                    "{self:?} expects {n} dimensions, got {}",
                    dims.len()
                )));
            }
            Ok(())
        };
        let mesh = match self {
            PrimitiveKind::Box => {
                need(3)?;
                TriMesh::box_mesh(dims[0], dims[1], dims[2])?
            }
            PrimitiveKind::Cylinder => {
                need(2)?;
                TriMesh::cylinder(dims[0], dims[1], 24)?
            }
            PrimitiveKind::Sphere => {
                need(1)?;
                TriMesh::icosphere(dims[0], 2)?
            }
            PrimitiveKind::CappedStack => {
                need(4)?;
                TriMesh::capped_cylinder_stack(dims[0], dims[1], dims[2], dims[3], 24)?
            }
            PrimitiveKind::LBlock => {
                need(5)?;
                TriMesh::l_block(dims[0], dims[1], dims[2], dims[3], dims[4])?
            }
        };
        let center = mesh.aabb().center();
        Ok(mesh.translated(-center))
    }
}

/// One object of a generated scene. `dims` are the primitive parameters in
/// meters; `pose` places the centered mesh in the world.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacedObject {
    pub kind: PrimitiveKind,
    pub dims: Vec<f64>,
    pub pose: Pose,
}

impl PlacedObject {
    pub fn mesh(&self) -> Result<TriMesh> {
        Ok(self.kind.build(&self.dims)?.transformed(&self.pose))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub workspace_side: f64,
    pub seed: u64,
    pub objects: Vec<PlacedObject>,
    /// Objects dropped because no placement was found; not persisted.
    #[serde(skip)]
    pub skipped: usize,
}

impl SceneDescription {
    pub fn meshes(&self) -> Result<Vec<TriMesh>> {
        self.objects.iter().map(|o| o.mesh()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, |w| {
            serde_json::to_writer_pretty(w, self)?;
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}

/// A pool entry: parameter draw plus its prebuilt centered mesh.
#[derive(Debug, Clone)]
pub struct PoolObject {
    pub kind: PrimitiveKind,
    pub dims: Vec<f64>,
    pub mesh: TriMesh,
    /// Volume centroid of the centered mesh (not the box center).
    pub centroid: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKinds {
    /// All five primitive kinds, cycled.
    All,
    /// Boxes only (the "blocks" benchmark scenario).
    BlocksOnly,
}

#[derive(Debug, Clone)]
pub struct ObjectPool {
    pub objects: Vec<PoolObject>,
}

/// Gripper jaw limit objects must respect; at least one side of every pool
/// object fits a slightly smaller opening so finger clearance remains.
const GRASPABLE_SIDE: f64 = 0.07;

impl ObjectPool {
    /// Deterministic parameter draws for `count` objects. Kinds cycle so
    /// the mix stays balanced at any count.
    pub fn generate(seed: u64, count: usize, kinds: PoolKinds) -> Result<ObjectPool> {
        if count == 0 {
            return Err(Error::Empty("object pool"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cycle: &[PrimitiveKind] = match kinds {
            PoolKinds::All => &[
                PrimitiveKind::Box,
                PrimitiveKind::Cylinder,
                PrimitiveKind::Sphere,
                PrimitiveKind::CappedStack,
                PrimitiveKind::LBlock,
            ],
            PoolKinds::BlocksOnly => &[PrimitiveKind::Box],
        };
        let mut objects = Vec::with_capacity(count);
        for i in 0..count {
            let kind = cycle[i % cycle.len()];
            let dims = sample_dims(kind, &mut rng);
            let mesh = kind.build(&dims)?;
            let centroid = mesh.centroid();
            objects.push(PoolObject { kind, dims, mesh, centroid });
        }
        Ok(ObjectPool { objects })
    }

    /// Indices of objects suitable for packed scenes: upright height above
    /// 1.5x the lateral extent.
    pub fn upright_tall(&self) -> Vec<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                let e = o.mesh.aabb();
                let h = e.max.z - e.min.z;
                let lateral = (e.max.x - e.min.x).max(e.max.y - e.min.y);
                h > 1.5 * lateral
            })
            .map(|(i, _)| i)
            .collect()
    }
}

fn sample_dims(kind: PrimitiveKind, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        PrimitiveKind::Box => {
            let mut d = [
                rng.random_range(0.03..0.10),
                rng.random_range(0.03..0.10),
                rng.random_range(0.03..0.10),
            ];
            // Guarantee a graspable side.
            let axis = rng.random_range(0..3);
            d[axis] = rng.random_range(0.03..GRASPABLE_SIDE);
            d.to_vec()
        }
        PrimitiveKind::Cylinder => {
            vec![rng.random_range(0.012..0.035), rng.random_range(0.04..0.12)]
        }
        PrimitiveKind::Sphere => vec![rng.random_range(0.015..0.035)],
        PrimitiveKind::CappedStack => {
            let rb = rng.random_range(0.025..0.04);
            let hb = rng.random_range(0.03..0.05);
            let rt = rng.random_range(0.012..rb - 0.008);
            let ht = rng.random_range(0.03..0.06);
            vec![rb, hb, rt, ht]
        }
        PrimitiveKind::LBlock => {
            let a = rng.random_range(0.06..0.10);
            let b = rng.random_range(0.05..0.09);
            let t = rng.random_range(0.018..0.034);
            let s = rng.random_range(0.018..0.034);
            let h = rng.random_range(0.02..0.035);
            vec![a, b, t, s, h]
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneGenParams {
    pub workspace_side: f64,
    /// Side of the square drop footprint for pile scenes.
    pub drop_footprint: f64,
    pub pile_attempts: usize,
    pub packed_attempts: usize,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        SceneGenParams {
            workspace_side: 0.30,
            drop_footprint: 0.15,
            pile_attempts: 50,
            packed_attempts: 12,
        }
    }
}

fn object_count(rng: &mut impl Rng) -> usize {
    let pois = Poisson::new(4.0f64).expect("valid Poisson rate");
    pois.sample(rng) as usize + 1
}

/// The 26 face, edge and corner directions of a cube, in a fixed order.
fn candidate_directions() -> Vec<Vec3> {
    let mut dirs = Vec::with_capacity(26);
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let v = Vec3::new(dx as f64, dy as f64, dz as f64);
                dirs.push(v.normalized().unwrap());
            }
        }
    }
    dirs
}

/// Minimal rotation taking `dir` to straight down.
fn align_to_down(dir: Vec3) -> Quaternion {
    let down = Vec3::new(0.0, 0.0, -1.0);
    let c = dir.dot(down).clamp(-1.0, 1.0);
    if c > 1.0 - 1e-12 {
        return Quaternion::IDENTITY;
    }
    if c < -1.0 + 1e-12 {
        return Quaternion::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), std::f64::consts::PI);
    }
    let axis = dir.cross(down).normalized().expect("non-parallel axis");
    Quaternion::from_axis_angle(axis, c.acos())
}

/// Vertical clearance left between settled meshes so contact never counts
/// as interpenetration.
const SETTLE_CLEARANCE: f64 = 1e-4;
/// Vertices this close to the support plane count as contacts.
const CONTACT_BAND: f64 = 1.5e-3;

fn collides_with_any(
    mesh: &TriMesh,
    offset: Vec3,
    placed: &[TriMesh],
    placed_boxes: &[Aabb],
) -> bool {
    let moved = {
        let a = mesh.aabb();
        Aabb { min: a.min + offset, max: a.max + offset }
    };
    placed
        .iter()
        .zip(placed_boxes)
        .any(|(other, obox)| moved.intersects(obox) && mesh_intersects_at(mesh, offset, other))
}

/// 2D convex hull (Andrew monotone chain), returning points in CCW order.
fn hull_2d(points: &mut Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    if points.len() < 3 {
        return points.clone();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in points.iter() {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Static stability on the support plane: the lateral center of mass must
/// lie strictly inside the contact convex hull. Degenerate hulls (point or
/// line contact from an edge-balanced pose) are unstable; rounded bodies
/// still pass because their contact band captures a small cap of vertices.
fn stable_on_plane(contact: &mut Vec<(f64, f64)>, com: (f64, f64)) -> bool {
    let hull = hull_2d(contact);
    if hull.len() < 3 {
        return false;
    }
    let margin = 1e-4;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let edge = (b.0 - a.0, b.1 - a.1);
        let len = (edge.0 * edge.0 + edge.1 * edge.1).sqrt();
        if len < 1e-12 {
            continue;
        }
        // Signed distance of the COM left of edge a->b (hull is CCW).
        let d = (edge.0 * (com.1 - a.1) - edge.1 * (com.0 - a.0)) / len;
        if d < margin {
            return false;
        }
    }
    true
}

struct Placement {
    pose: Pose,
    com_z: f64,
}

/// Try every candidate orientation at the drop point and return the stable
/// rest pose with the lowest center of mass (ties keep the earliest
/// candidate). Returns None when nothing stable fits the workspace.
fn drop_object(
    obj: &PoolObject,
    x: f64,
    y: f64,
    yaw: f64,
    placed: &[TriMesh],
    placed_boxes: &[Aabb],
    params: &SceneGenParams,
) -> Option<Pose> {
    let yaw_q = Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), yaw);
    let top_of_pile = placed_boxes
        .iter()
        .map(|b| b.max.z)
        .fold(0.0f64, f64::max);
    let mut best: Option<Placement> = None;
    for dir in candidate_directions() {
        let q = yaw_q * align_to_down(dir);
        let rotated = obj.mesh.transformed(&Pose::new(q, Vec3::ZERO));
        let aabb = rotated.aabb();
        let z_plane = -aabb.min.z;
        let com_local = q.rotate(obj.centroid);

        let plane_offset = Vec3::new(x, y, z_plane);
        let (rest, on_plane) = if !collides_with_any(&rotated, plane_offset, placed, placed_boxes)
        {
            (z_plane, true)
        } else {
            // Bisect the collide/free boundary along z; hi starts above
            // everything already placed.
            let mut lo = z_plane;
            let mut hi = top_of_pile - aabb.min.z + 1e-3;
            debug_assert!(
                !collides_with_any(&rotated, Vec3::new(x, y, hi), placed, placed_boxes)
            );
            for _ in 0..45 {
                let mid = 0.5 * (lo + hi);
                if collides_with_any(&rotated, Vec3::new(x, y, mid), placed, placed_boxes) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (hi + SETTLE_CLEARANCE, false)
        };

        if rest + aabb.max.z > params.workspace_side {
            continue; // pile has outgrown the workspace here
        }
        let stable = if on_plane {
            let mut contact: Vec<(f64, f64)> = rotated
                .vertices
                .iter()
                .filter(|v| v.z - aabb.min.z <= CONTACT_BAND)
                .map(|v| (v.x + x, v.y + y))
                .collect();
            stable_on_plane(&mut contact, (com_local.x + x, com_local.y + y))
        } else {
            // Resting on the pile counts as stable; tilted clutter is the
            // point of pile scenes.
            true
        };
        if !stable {
            continue;
        }
        let com_z = com_local.z + rest;
        if best.as_ref().is_none_or(|b| com_z < b.com_z) {
            best = Some(Placement {
                pose: Pose::new(q, Vec3::new(x, y, rest)),
                com_z,
            });
        }
    }
    best.map(|b| b.pose)
}

/// Drop objects into a square footprint and settle them quasi-statically.
/// The object count is drawn from the shifted Poisson used for training
/// scenes.
pub fn generate_pile(seed: u64, pool: &ObjectPool, params: &SceneGenParams) -> Result<SceneDescription> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = object_count(&mut rng);
    pile_scene(seed, pool, params, m, &mut rng)
}

/// Pile with a caller-chosen object count; benchmark rounds pin `m`.
pub fn generate_pile_with_count(
    seed: u64,
    pool: &ObjectPool,
    params: &SceneGenParams,
    count: usize,
) -> Result<SceneDescription> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pile_scene(seed, pool, params, count, &mut rng)
}

fn pile_scene(
    seed: u64,
    pool: &ObjectPool,
    params: &SceneGenParams,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneDescription> {
    if pool.objects.is_empty() {
        return Err(Error::Empty("object pool"));
    }
    let half = params.drop_footprint / 2.0;
    let mut placed_meshes: Vec<TriMesh> = Vec::new();
    let mut placed_boxes: Vec<Aabb> = Vec::new();
    let mut objects = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..m {
        let oi = rng.random_range(0..pool.objects.len());
        let obj = &pool.objects[oi];
        let mut found = None;
        for _ in 0..params.pile_attempts {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let yaw = rng.random_range(0.0..TAU);
            if let Some(pose) =
                drop_object(obj, x, y, yaw, &placed_meshes, &placed_boxes, params)
            {
                found = Some(pose);
                break;
            }
        }
        match found {
            Some(pose) => {
                let mesh = obj.mesh.transformed(&pose);
                placed_boxes.push(mesh.aabb());
                placed_meshes.push(mesh);
                objects.push(PlacedObject { kind: obj.kind, dims: obj.dims.clone(), pose });
            }
            None => skipped += 1,
        }
    }
    Ok(SceneDescription {
        workspace_side: params.workspace_side,
        seed,
        objects,
        skipped,
    })
}

/// Place upright objects at random free positions, rejecting collisions.
/// The object count is drawn as in [`generate_pile`].
pub fn generate_packed(
    seed: u64,
    pool: &ObjectPool,
    params: &SceneGenParams,
) -> Result<SceneDescription> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = object_count(&mut rng);
    packed_scene(seed, pool, params, m, &mut rng)
}

/// Packed scene with a caller-chosen object count.
pub fn generate_packed_with_count(
    seed: u64,
    pool: &ObjectPool,
    params: &SceneGenParams,
    count: usize,
) -> Result<SceneDescription> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    packed_scene(seed, pool, params, count, &mut rng)
}

fn packed_scene(
    seed: u64,
    pool: &ObjectPool,
    params: &SceneGenParams,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SceneDescription> {
    let eligible = pool.upright_tall();
    if eligible.is_empty() {
        return Err(Error::Empty("packed-eligible objects (height > 1.5x lateral)"));
    }
    let half = params.workspace_side / 2.0;
    let mut placed_meshes: Vec<TriMesh> = Vec::new();
    let mut placed_boxes: Vec<Aabb> = Vec::new();
    let mut objects = Vec::new();
    let mut skipped = 0usize;
    for _ in 0..m {
        let oi = eligible[rng.random_range(0..eligible.len())];
        let obj = &pool.objects[oi];
        let z = -obj.mesh.aabb().min.z;
        let mut found = None;
        for _ in 0..params.packed_attempts {
            let x = rng.random_range(-half..half);
            let y = rng.random_range(-half..half);
            let yaw = rng.random_range(0.0..TAU);
            let pose = Pose::new(
                Quaternion::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), yaw),
                Vec3::new(x, y, z + SETTLE_CLEARANCE),
            );
            let rotated = obj.mesh.transformed(&Pose::new(pose.rotation, Vec3::ZERO));
            if !collides_with_any(&rotated, pose.translation, &placed_meshes, &placed_boxes) {
                found = Some(pose);
                break;
            }
        }
        match found {
            Some(pose) => {
                let mesh = obj.mesh.transformed(&pose);
                placed_boxes.push(mesh.aabb());
                placed_meshes.push(mesh);
                objects.push(PlacedObject { kind: obj.kind, dims: obj.dims.clone(), pose });
            }
            None => skipped += 1,
        }
    }
    Ok(SceneDescription {
        workspace_side: params.workspace_side,
        seed,
        objects,
        skipped,
    })
}

/// Spherical viewpoint around the workspace center.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ViewpointSample {
    pub radius: f64,
    pub theta: f64,
    pub phi: f64,
    pub target: Vec3,
}

impl ViewpointSample {
    pub fn sample(rng: &mut impl Rng, workspace_side: f64) -> ViewpointSample {
        let l = workspace_side;
        ViewpointSample {
            radius: rng.random_range(1.6 * l..2.4 * l),
            theta: rng.random_range(0.0..std::f64::consts::FRAC_PI_4),
            phi: rng.random_range(0.0..TAU),
            target: Vec3::new(0.0, 0.0, l / 2.0),
        }
    }

    pub fn eye(&self) -> Vec3 {
        let (st, ct) = (self.theta.sin(), self.theta.cos());
        self.target
            + Vec3::new(
                self.radius * st * self.phi.cos(),
                self.radius * st * self.phi.sin(),
                self.radius * ct,
            )
    }

    pub fn camera_pose(&self) -> Result<Pose> {
        look_at(self.eye(), self.target)
    }
}

/// Render a depth image of the meshes plus the infinite support plane z=0.
/// Depths are camera-frame z; pixels seeing nothing stay 0.
pub fn render_depth(
    meshes: &[TriMesh],
    camera: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<DepthImage> {
    intrinsics.validate()?;
    let width = intrinsics.width as usize;
    let height = intrinsics.height as usize;
    let eye = camera.translation;
    let mut depths = vec![0.0f32; width * height];
    let refs: Vec<&TriMesh> = meshes.iter().collect();
    depths
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(v, row)| {
            for (u, out) in row.iter_mut().enumerate() {
                let dir_cam = intrinsics.pixel_ray(u as u32, v as u32);
                let dir = camera.rotation.rotate(dir_cam);
                let mut t_hit = f64::INFINITY;
                if let Some(hit) = crate::geometry::ray_cast(&refs, eye, dir) {
                    t_hit = hit.distance;
                }
                if dir.z.abs() > 1e-12 {
                    let t_plane = -eye.z / dir.z;
                    if t_plane > 0.0 && t_plane < t_hit {
                        t_hit = t_plane;
                    }
                }
                if t_hit.is_finite() {
                    *out = (t_hit * dir_cam.z) as f32;
                }
            }
        });
    DepthImage::new(*intrinsics, *camera, depths)
}

/// Render a scene from a sampled viewpoint.
pub fn render_scene(
    scene: &SceneDescription,
    view: &ViewpointSample,
    intrinsics: &CameraIntrinsics,
) -> Result<DepthImage> {
    let meshes = scene.meshes()?;
    render_depth(&meshes, &view.camera_pose()?, intrinsics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::meshes_intersect;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn small_pool() -> ObjectPool {
        ObjectPool::generate(42, 10, PoolKinds::All).unwrap()
    }

    #[test]
    fn pool_is_deterministic_and_graspable() {
        let a = ObjectPool::generate(7, 20, PoolKinds::All).unwrap();
        let b = ObjectPool::generate(7, 20, PoolKinds::All).unwrap();
        assert_eq!(a.objects.len(), 20);
        for (x, y) in a.objects.iter().zip(&b.objects) {
            assert_eq!(x.dims, y.dims);
            assert_eq!(x.kind, y.kind);
        }
        let c = ObjectPool::generate(8, 20, PoolKinds::All).unwrap();
        assert!(a.objects.iter().zip(&c.objects).any(|(x, y)| x.dims != y.dims));
        // Every object has at least one graspable side.
        for o in &a.objects {
            let e = o.mesh.aabb();
            let sides = [e.max.x - e.min.x, e.max.y - e.min.y, e.max.z - e.min.z];
            assert!(
                sides.iter().any(|s| *s < 0.08),
                "{:?} {:?} has no graspable side",
                o.kind,
                o.dims
            );
        }
    }

    #[test]
    fn blocks_pool_contains_only_boxes() {
        let pool = ObjectPool::generate(3, 12, PoolKinds::BlocksOnly).unwrap();
        assert!(pool.objects.iter().all(|o| o.kind == PrimitiveKind::Box));
    }

    #[test]
    fn sphere_rests_at_its_radius() {
        let pool = ObjectPool {
            objects: {
                let mesh = PrimitiveKind::Sphere.build(&[0.03]).unwrap();
                let centroid = mesh.centroid();
                vec![PoolObject {
                    kind: PrimitiveKind::Sphere,
                    dims: vec![0.03],
                    mesh,
                    centroid,
                }]
            },
        };
        let params = SceneGenParams::default();
        let pose = drop_object(&pool.objects[0], 0.01, -0.02, 1.3, &[], &[], &params).unwrap();
        // Faceting makes the rest height fractionally less than the radius.
        assert_abs_diff_eq!(pose.translation.z, 0.03, epsilon = 5e-4);
    }

    #[test]
    fn box_never_balances_on_an_edge() {
        let mesh = PrimitiveKind::Box.build(&[0.04, 0.05, 0.06]).unwrap();
        let centroid = mesh.centroid();
        let obj = PoolObject {
            kind: PrimitiveKind::Box,
            dims: vec![0.04, 0.05, 0.06],
            mesh,
            centroid,
        };
        let params = SceneGenParams::default();
        for yaw in [0.0, 0.7, 2.1] {
            let pose = drop_object(&obj, 0.0, 0.0, yaw, &[], &[], &params).unwrap();
            // Lowest stable pose on a plane lays the box on its largest
            // face, so the smallest extent points up.
            let m = obj.mesh.transformed(&pose);
            let e = m.aabb();
            assert_relative_eq!(e.max.z - e.min.z, 0.04, epsilon = 1e-9);
        }
    }

    #[test]
    fn pile_object_count_follows_shifted_poisson() {
        // The count draw happens before any settling, so a tiny pool keeps
        // this statistical check fast.
        let mesh = PrimitiveKind::Box.build(&[0.02, 0.02, 0.02]).unwrap();
        let centroid = mesh.centroid();
        let pool = ObjectPool {
            objects: vec![PoolObject {
                kind: PrimitiveKind::Box,
                dims: vec![0.02, 0.02, 0.02],
                mesh,
                centroid,
            }],
        };
        let params = SceneGenParams::default();
        let mut total = 0usize;
        let scenes = 10_000usize;
        for seed in 0..scenes {
            let scene = generate_pile(seed as u64, &pool, &params).unwrap();
            total += scene.objects.len() + scene.skipped;
        }
        let mean = total as f64 / scenes as f64;
        assert!((mean - 5.0).abs() < 0.1, "mean object count {mean}");
    }

    #[test]
    fn pile_scenes_have_no_interpenetration() {
        let pool = small_pool();
        let params = SceneGenParams::default();
        for seed in 0..12u64 {
            let scene = generate_pile(seed, &pool, &params).unwrap();
            let meshes = scene.meshes().unwrap();
            for i in 0..meshes.len() {
                assert!(meshes[i].aabb().min.z >= -1e-9, "object below the plane");
                for j in i + 1..meshes.len() {
                    assert!(
                        !meshes_intersect(&meshes[i], &meshes[j]),
                        "seed {seed}: objects {i} and {j} interpenetrate"
                    );
                }
            }
        }
    }

    #[test]
    fn pile_scenes_are_reproducible() {
        let pool = small_pool();
        let params = SceneGenParams::default();
        let a = generate_pile(99, &pool, &params).unwrap();
        let b = generate_pile(99, &pool, &params).unwrap();
        assert_eq!(a.objects.len(), b.objects.len());
        for (x, y) in a.objects.iter().zip(&b.objects) {
            assert_eq!(x.pose.translation.to_array(), y.pose.translation.to_array());
        }
        let c = generate_pile(100, &pool, &params).unwrap();
        let same = a.objects.len() == c.objects.len()
            && a.objects
                .iter()
                .zip(&c.objects)
                .all(|(x, y)| x.pose.translation.to_array() == y.pose.translation.to_array());
        assert!(!same, "different seeds should differ");
    }

    #[test]
    fn piles_actually_tilt_objects() {
        let pool = small_pool();
        let params = SceneGenParams::default();
        let up = Vec3::new(0.0, 0.0, 1.0);
        let mut crowded = 0usize;
        let mut tilted = 0usize;
        for seed in 0..300u64 {
            let scene = generate_pile(seed, &pool, &params).unwrap();
            if scene.objects.len() < 4 {
                continue;
            }
            crowded += 1;
            let any_tilted = scene.objects.iter().any(|o| {
                let z = o.pose.rotation.rotate(up);
                z.dot(up).clamp(-1.0, 1.0).acos() > 20.0f64.to_radians()
            });
            if any_tilted {
                tilted += 1;
            }
        }
        assert!(crowded >= 50, "too few crowded scenes to judge: {crowded}");
        let ratio = tilted as f64 / crowded as f64;
        assert!(ratio >= 0.3, "only {ratio:.2} of crowded piles tilt an object");
    }

    #[test]
    fn packed_scenes_stay_upright_and_separated() {
        let pool = ObjectPool::generate(21, 30, PoolKinds::All).unwrap();
        let params = SceneGenParams::default();
        let up = Vec3::new(0.0, 0.0, 1.0);
        for seed in 0..10u64 {
            let scene = generate_packed(seed, &pool, &params).unwrap();
            assert!(!scene.objects.is_empty());
            let meshes = scene.meshes().unwrap();
            for o in &scene.objects {
                let z = o.pose.rotation.rotate(up);
                assert!((z - up).norm() < 1e-6, "object not upright: {z:?}");
            }
            for i in 0..meshes.len() {
                for j in i + 1..meshes.len() {
                    assert!(!meshes_intersect(&meshes[i], &meshes[j]));
                }
            }
        }
    }

    #[test]
    fn single_packed_object_always_lands() {
        // Pools this size always contain a few tall objects; tiny pools can
        // legitimately fail packed generation with Error::Empty.
        let pool = ObjectPool::generate(5, 40, PoolKinds::All).unwrap();
        assert!(!pool.upright_tall().is_empty());
        let params = SceneGenParams::default();
        for seed in 0..30u64 {
            let scene = generate_packed(seed, &pool, &params).unwrap();
            assert!(scene.objects.len() + scene.skipped >= 1);
            assert!(!scene.objects.is_empty(), "first object always fits");
        }
    }

    #[test]
    fn viewpoint_statistics_match_their_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = 0.30;
        let mut sum = 0.0;
        let (mut min_r, mut max_r) = (f64::INFINITY, 0.0f64);
        for _ in 0..10_000 {
            let v = ViewpointSample::sample(&mut rng, l);
            assert!((0.0..=std::f64::consts::FRAC_PI_4).contains(&v.theta));
            assert!((0.0..TAU).contains(&v.phi));
            sum += v.radius;
            min_r = min_r.min(v.radius);
            max_r = max_r.max(v.radius);
        }
        assert!(min_r >= 1.6 * l);
        assert!(max_r <= 2.4 * l);
        let mean = sum / 10_000.0;
        assert!((mean - 2.0 * l).abs() < 0.02 * l, "mean radius {mean}");
    }

    #[test]
    fn empty_scene_renders_the_support_plane() {
        let intr = CameraIntrinsics::default();
        let view = ViewpointSample {
            radius: 0.55,
            theta: 0.5,
            phi: 1.0,
            target: Vec3::new(0.0, 0.0, 0.15),
        };
        let pose = view.camera_pose().unwrap();
        let img = render_depth(&[], &pose, &intr).unwrap();
        let eye = pose.translation;
        for (u, v) in [(0u32, 0u32), (160, 120), (319, 239), (42, 200)] {
            let dir_cam = intr.pixel_ray(u, v);
            let dir = pose.rotation.rotate(dir_cam);
            let expected = if dir.z < -1e-12 {
                ((-eye.z / dir.z) * dir_cam.z) as f32
            } else {
                0.0
            };
            assert_abs_diff_eq!(img.depth(u, v), expected, epsilon = 1e-6);
        }
    }

    #[test]
    fn sphere_from_above_has_analytic_nearest_depth() {
        let scene = SceneDescription {
            workspace_side: 0.30,
            seed: 0,
            objects: vec![PlacedObject {
                kind: PrimitiveKind::Sphere,
                dims: vec![0.05],
                pose: Pose::from_translation(Vec3::new(0.0, 0.0, 0.15)),
            }],
            skipped: 0,
        };
        let view = ViewpointSample {
            radius: 0.50,
            theta: 0.0,
            phi: 0.0,
            target: Vec3::new(0.0, 0.0, 0.15),
        };
        let img = render_scene(&scene, &view, &CameraIntrinsics::default()).unwrap();
        let min_depth = img
            .depths
            .iter()
            .filter(|d| **d > 0.0)
            .fold(f32::INFINITY, |a, &b| a.min(b));
        // The optical axis pierces the icosphere pole, which is exact.
        assert_abs_diff_eq!(min_depth, 0.45, epsilon = 1e-6);
        assert_abs_diff_eq!(img.depth(160, 120), 0.45, epsilon = 1e-6);
    }

    #[test]
    fn doubling_resolution_keeps_shared_rays() {
        let pool = small_pool();
        let params = SceneGenParams::default();
        let scene = generate_pile(5, &pool, &params).unwrap();
        let meshes = scene.meshes().unwrap();
        let view = ViewpointSample {
            radius: 0.55,
            theta: 0.4,
            phi: 2.0,
            target: Vec3::new(0.0, 0.0, 0.15),
        };
        let pose = view.camera_pose().unwrap();
        let base = CameraIntrinsics {
            width: 64,
            height: 48,
            fx: 60.0,
            fy: 60.0,
            cx: 32.0,
            cy: 24.0,
        };
        let double = CameraIntrinsics {
            width: 128,
            height: 96,
            fx: 120.0,
            fy: 120.0,
            cx: 64.0,
            cy: 48.0,
        };
        let img1 = render_depth(&meshes, &pose, &base).unwrap();
        let img2 = render_depth(&meshes, &pose, &double).unwrap();
        for v in 0..48u32 {
            for u in 0..64u32 {
                assert_eq!(img1.depth(u, v), img2.depth(2 * u, 2 * v));
            }
        }
    }

    #[test]
    fn scene_json_round_trips() {
        let pool = small_pool();
        let params = SceneGenParams::default();
        let scene = generate_pile(17, &pool, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.scene.json");
        scene.save(&path).unwrap();
        let loaded = SceneDescription::load(&path).unwrap();
        assert_eq!(loaded.seed, scene.seed);
        assert_eq!(loaded.objects.len(), scene.objects.len());
        for (a, b) in scene.objects.iter().zip(&loaded.objects) {
            assert_eq!(a.dims, b.dims);
            assert_eq!(a.pose.translation.to_array(), b.pose.translation.to_array());
            // Rebuilt meshes are bit-identical because dims round-trip.
            let (ma, mb) = (a.mesh().unwrap(), b.mesh().unwrap());
            assert_eq!(ma.vertices.len(), mb.vertices.len());
        }
    }
}
