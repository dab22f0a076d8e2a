//! Rigid-body math, triangle meshes and the parallel-jaw gripper model.

mod bvh;
mod gripper;
mod mesh;
mod pose;
mod quat;
mod vec;

pub use bvh::{
    mesh_contains, mesh_intersects_at, meshes_intersect, ray_cast, tri_tri_intersect, Bvh, RayHit,
};
pub use gripper::{gripper_bodies, GripperModel};
pub use mesh::TriMesh;
pub use pose::Pose;
pub use quat::Quaternion;
pub use vec::{Aabb, Vec3};
