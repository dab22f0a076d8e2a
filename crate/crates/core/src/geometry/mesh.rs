use super::bvh::Bvh;
use super::{Aabb, Pose, Vec3};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::Write;

/// Indexed triangle mesh with a bounding-volume hierarchy built on
/// construction. Vertices are in the mesh's local frame; scene code bakes
/// poses into world-space copies so queries need no per-call transform.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    bvh: Bvh,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::Empty("mesh must have vertices and triangles"));
        }
        let n = vertices.len() as u32;
        for t in &triangles {
            if t[0] >= n || t[1] >= n || t[2] >= n {
                return Err(Error::invalid(format!(
                    "triangle {t:?} references a vertex beyond {n}"
                )));
            }
        }
        let bvh = Bvh::build(&vertices, &triangles);
        Ok(TriMesh { vertices, triangles, bvh })
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn tri(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    pub fn min_z(&self) -> f64 {
        self.vertices.iter().map(|v| v.z).fold(f64::INFINITY, f64::min)
    }

    /// World-space copy with `pose` baked into the vertices.
    pub fn transformed(&self, pose: &Pose) -> TriMesh {
        let vertices: Vec<Vec3> = self.vertices.iter().map(|&v| pose.apply(v)).collect();
        let bvh = Bvh::build(&vertices, &self.triangles);
        TriMesh { vertices, triangles: self.triangles.clone(), bvh }
    }

    pub fn translated(&self, offset: Vec3) -> TriMesh {
        self.transformed(&Pose::from_translation(offset))
    }

    /// Closed and consistently wound: every undirected edge is shared by
    /// exactly two triangles, once in each direction.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                if a == b {
                    return false;
                }
                let key = (a.min(b), a.max(b));
                let e = edges.entry(key).or_insert((0, 0));
                if a < b {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
        }
        edges.values().all(|&(fwd, rev)| fwd == 1 && rev == 1)
    }

    /// Signed volume; positive for outward-wound closed meshes.
    pub fn volume(&self) -> f64 {
        let mut v6 = 0.0;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.tri(i);
            v6 += a.dot(b.cross(c));
        }
        v6 / 6.0
    }

    /// Center of mass assuming uniform density.
    pub fn centroid(&self) -> Vec3 {
        let mut v6 = 0.0;
        let mut acc = Vec3::ZERO;
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.tri(i);
            let d = a.dot(b.cross(c));
            v6 += d;
            acc += (a + b + c) * (d / 4.0);
        }
        acc / v6
    }

    fn oriented_outward(mut vertices: Vec<Vec3>, mut triangles: Vec<[u32; 3]>) -> Result<TriMesh> {
        // Generators below produce a consistent winding; flip globally if it
        // came out inward so the signed volume is positive.
        let mut v6 = 0.0;
        for t in &triangles {
            let (a, b, c) = (
                vertices[t[0] as usize],
                vertices[t[1] as usize],
                vertices[t[2] as usize],
            );
            v6 += a.dot(b.cross(c));
        }
        if v6 < 0.0 {
            for t in &mut triangles {
                t.swap(1, 2);
            }
        }
        vertices.shrink_to_fit();
        TriMesh::new(vertices, triangles)
    }

    /// Axis-aligned box with full extents `(sx, sy, sz)`, centered at the
    /// origin.
    pub fn box_mesh(sx: f64, sy: f64, sz: f64) -> Result<TriMesh> {
        if sx <= 0.0 || sy <= 0.0 || sz <= 0.0 {
            return Err(Error::invalid("box extents must be positive"));
        }
        let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
        let mut vertices = Vec::with_capacity(8);
        for &z in &[-hz, hz] {
            for &y in &[-hy, hy] {
                for &x in &[-hx, hx] {
                    vertices.push(Vec3::new(x, y, z));
                }
            }
        }
        // Vertex index = x_bit + 2*y_bit + 4*z_bit.
        let quads: [[u32; 4]; 6] = [
            [0, 2, 3, 1], // bottom (z-)
            [4, 5, 7, 6], // top (z+)
            [0, 1, 5, 4], // front (y-)
            [2, 6, 7, 3], // back (y+)
            [0, 4, 6, 2], // left (x-)
            [1, 3, 7, 5], // right (x+)
        ];
        let mut triangles = Vec::with_capacity(12);
        for q in quads {
            triangles.push([q[0], q[1], q[2]]);
            triangles.push([q[0], q[2], q[3]]);
        }
        TriMesh::oriented_outward(vertices, triangles)
    }

    /// Surface of revolution about the z axis. The profile is a polyline of
    /// `(radius, z)` pairs; both endpoints must have radius 0 so the surface
    /// closes. Intermediate radii must be positive.
    pub fn lathe(profile: &[(f64, f64)], segments: usize) -> Result<TriMesh> {
        if profile.len() < 3 {
            return Err(Error::invalid("lathe profile needs at least 3 points"));
        }
        if segments < 3 {
            return Err(Error::invalid("lathe needs at least 3 segments"));
        }
        let last = profile.len() - 1;
        if profile[0].0 != 0.0 || profile[last].0 != 0.0 {
            return Err(Error::invalid("lathe profile must start and end on the axis"));
        }
        if profile[1..last].iter().any(|&(r, _)| r <= 0.0) {
            return Err(Error::invalid("interior lathe radii must be positive"));
        }

        let mut vertices = Vec::new();
        // ring_start[i] = first vertex of ring i; poles contribute 1 vertex.
        let mut ring_start = Vec::with_capacity(profile.len());
        for &(r, z) in profile {
            ring_start.push(vertices.len() as u32);
            if r == 0.0 {
                vertices.push(Vec3::new(0.0, 0.0, z));
            } else {
                for s in 0..segments {
                    let a = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
                    vertices.push(Vec3::new(r * a.cos(), r * a.sin(), z));
                }
            }
        }

        let mut triangles = Vec::new();
        for i in 0..last {
            let (r0, _) = profile[i];
            let (r1, _) = profile[i + 1];
            let s0 = ring_start[i];
            let s1 = ring_start[i + 1];
            for s in 0..segments as u32 {
                let sn = (s + 1) % segments as u32;
                match (r0 == 0.0, r1 == 0.0) {
                    (true, false) => triangles.push([s0, s1 + s, s1 + sn]),
                    (false, true) => triangles.push([s0 + s, s1, s0 + sn]),
                    (false, false) => {
                        triangles.push([s0 + s, s1 + s, s1 + sn]);
                        triangles.push([s0 + s, s1 + sn, s0 + sn]);
                    }
                    (true, true) => {
                        return Err(Error::invalid("adjacent lathe profile points on the axis"))
                    }
                }
            }
        }
        TriMesh::oriented_outward(vertices, triangles)
    }

    /// Right cylinder of the given radius and height, axis +z, centered at
    /// the origin.
    pub fn cylinder(radius: f64, height: f64, segments: usize) -> Result<TriMesh> {
        if radius <= 0.0 || height <= 0.0 {
            return Err(Error::invalid("cylinder dimensions must be positive"));
        }
        let h = height / 2.0;
        TriMesh::lathe(&[(0.0, -h), (radius, -h), (radius, h), (0.0, h)], segments)
    }

    /// Two stacked coaxial cylinders sharing one cap (a squat base with a
    /// narrower top), centered at the origin.
    pub fn capped_cylinder_stack(
        r_base: f64,
        h_base: f64,
        r_top: f64,
        h_top: f64,
        segments: usize,
    ) -> Result<TriMesh> {
        if r_base <= 0.0 || h_base <= 0.0 || r_top <= 0.0 || h_top <= 0.0 {
            return Err(Error::invalid("stack dimensions must be positive"));
        }
        if r_top >= r_base {
            return Err(Error::invalid("top radius must be smaller than base radius"));
        }
        let zc = (h_base + h_top) / 2.0;
        TriMesh::lathe(
            &[
                (0.0, -zc),
                (r_base, -zc),
                (r_base, h_base - zc),
                (r_top, h_base - zc),
                (r_top, h_base + h_top - zc),
                (0.0, h_base + h_top - zc),
            ],
            segments,
        )
    }

    /// Icosphere with vertices at the ±z poles, so the mesh touches its
    /// bounding sphere exactly at the poles.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Result<TriMesh> {
        if radius <= 0.0 {
            return Err(Error::invalid("sphere radius must be positive"));
        }
        // Pole-oriented icosahedron: poles plus two staggered rings of five
        // at latitude atan(1/2).
        let lat = 0.5f64.atan();
        let (rc, rs) = (lat.cos(), lat.sin());
        let mut vertices = vec![Vec3::new(0.0, 0.0, 1.0)];
        for k in 0..5 {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
            vertices.push(Vec3::new(rc * a.cos(), rc * a.sin(), rs));
        }
        for k in 0..5 {
            let a = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / 5.0;
            vertices.push(Vec3::new(rc * a.cos(), rc * a.sin(), -rs));
        }
        vertices.push(Vec3::new(0.0, 0.0, -1.0));
        let mut triangles: Vec<[u32; 3]> = Vec::with_capacity(20);
        for k in 0..5u32 {
            let kn = (k + 1) % 5;
            triangles.push([0, 1 + k, 1 + kn]);
            triangles.push([1 + k, 6 + k, 1 + kn]);
            triangles.push([1 + kn, 6 + k, 6 + kn]);
            triangles.push([6 + k, 11, 6 + kn]);
        }

        for _ in 0..subdivisions {
            let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for t in &triangles {
                let mut mid = [0u32; 3];
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    let key = (a.min(b), a.max(b));
                    mid[k] = *midpoints.entry(key).or_insert_with(|| {
                        let m = (vertices[a as usize] + vertices[b as usize]) * 0.5;
                        vertices.push(m.normalized().expect("midpoint away from center"));
                        (vertices.len() - 1) as u32
                    });
                }
                next.push([t[0], mid[0], mid[2]]);
                next.push([t[1], mid[1], mid[0]]);
                next.push([t[2], mid[2], mid[1]]);
                next.push([mid[0], mid[1], mid[2]]);
            }
            triangles = next;
        }

        for v in &mut vertices {
            *v = *v * radius;
        }
        TriMesh::oriented_outward(vertices, triangles)
    }

    /// L-shaped prism: the union of footprints `[0,a]x[0,s]` and
    /// `[0,t]x[0,b]` extruded to `height`, then centered on its bounding-box
    /// center. Requires `t < a` and `s < b`.
    pub fn l_block(a: f64, b: f64, t: f64, s: f64, height: f64) -> Result<TriMesh> {
        if a <= 0.0 || b <= 0.0 || t <= 0.0 || s <= 0.0 || height <= 0.0 {
            return Err(Error::invalid("l-block dimensions must be positive"));
        }
        if t >= a || s >= b {
            return Err(Error::invalid("l-block arm must be thinner than its extents"));
        }
        // Footprint grid points; (t, s) splits the L into three cells so the
        // triangulation has no T-junctions.
        let grid = [
            (0.0, 0.0),
            (t, 0.0),
            (a, 0.0),
            (0.0, s),
            (t, s),
            (a, s),
            (0.0, b),
            (t, b),
        ];
        let nv = grid.len() as u32;
        let mut vertices = Vec::with_capacity(grid.len() * 2);
        for &(x, y) in &grid {
            vertices.push(Vec3::new(x, y, 0.0));
        }
        for &(x, y) in &grid {
            vertices.push(Vec3::new(x, y, height));
        }
        let cells: [[u32; 4]; 3] = [[0, 1, 4, 3], [1, 2, 5, 4], [3, 4, 7, 6]];
        let mut triangles = Vec::new();
        for c in cells {
            // Bottom faces wind downward, top faces upward.
            triangles.push([c[0], c[2], c[1]]);
            triangles.push([c[0], c[3], c[2]]);
            triangles.push([nv + c[0], nv + c[1], nv + c[2]]);
            triangles.push([nv + c[0], nv + c[2], nv + c[3]]);
        }
        // Boundary loop, counter-clockwise in the footprint plane.
        let boundary = [0u32, 1, 2, 5, 4, 7, 6, 3];
        for k in 0..boundary.len() {
            let i = boundary[k];
            let j = boundary[(k + 1) % boundary.len()];
            triangles.push([i, j, nv + j]);
            triangles.push([i, nv + j, nv + i]);
        }
        let mesh = TriMesh::oriented_outward(vertices, triangles)?;
        let c = mesh.aabb().center();
        Ok(mesh.translated(-c))
    }

    /// Object File Format text, parseable by standard mesh viewers.
    pub fn to_off(&self) -> String {
        let mut s = String::new();
        s.push_str("OFF\n");
        s.push_str(&format!("{} {} 0\n", self.vertices.len(), self.triangles.len()));
        for v in &self.vertices {
            s.push_str(&format!("{} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
        }
        s
    }

    pub fn write_off<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(self.to_off().as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn box_volume_and_centroid() {
        let m = TriMesh::box_mesh(0.04, 0.06, 0.1).unwrap();
        assert!(m.is_watertight());
        assert_relative_eq!(m.volume(), 0.04 * 0.06 * 0.1, epsilon = 1e-12);
        assert!(m.centroid().norm() < 1e-12);
        let shifted = m.translated(Vec3::new(0.1, -0.2, 0.3));
        let c = shifted.centroid();
        assert!((c - Vec3::new(0.1, -0.2, 0.3)).norm() < 1e-12);
    }

    #[test]
    fn primitives_are_watertight() {
        let meshes = [
            TriMesh::box_mesh(0.03, 0.05, 0.08).unwrap(),
            TriMesh::cylinder(0.02, 0.07, 16).unwrap(),
            TriMesh::icosphere(0.03, 2).unwrap(),
            TriMesh::capped_cylinder_stack(0.03, 0.03, 0.015, 0.04, 16).unwrap(),
            TriMesh::l_block(0.07, 0.06, 0.02, 0.025, 0.03).unwrap(),
        ];
        for m in &meshes {
            assert!(m.is_watertight());
            assert!(m.volume() > 0.0);
        }
    }

    #[test]
    fn icosphere_touches_poles_exactly() {
        let r = 0.03;
        let m = TriMesh::icosphere(r, 2).unwrap();
        assert_relative_eq!(m.min_z(), -r, epsilon = 1e-15);
        let max_z = m.vertices.iter().map(|v| v.z).fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(max_z, r, epsilon = 1e-15);
        for v in &m.vertices {
            assert_relative_eq!(v.norm(), r, epsilon = 1e-12);
        }
    }

    #[test]
    fn cylinder_volume_approaches_pi_r2_h() {
        let (r, h) = (0.02, 0.05);
        let m = TriMesh::cylinder(r, h, 64).unwrap();
        let exact = std::f64::consts::PI * r * r * h;
        // Inscribed polygon underestimates by (1 - sin(a)/a) with a = 2pi/n.
        assert!((m.volume() - exact).abs() / exact < 0.01);
    }

    #[test]
    fn l_block_volume_is_union_of_arms() {
        let (a, b, t, s, h) = (0.08, 0.06, 0.02, 0.02, 0.03);
        let m = TriMesh::l_block(a, b, t, s, h).unwrap();
        let expected = (a * s + t * (b - s)) * h;
        assert_relative_eq!(m.volume(), expected, epsilon = 1e-12);
    }

    #[test]
    fn off_export_parses_back() {
        let m = TriMesh::cylinder(0.02, 0.05, 12).unwrap();
        let text = m.to_off();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("OFF"));
        let counts: Vec<usize> = lines
            .next()
            .unwrap()
            .split_whitespace()
            .map(|w| w.parse().unwrap())
            .collect();
        assert_eq!(counts[0], m.vertices.len());
        assert_eq!(counts[1], m.triangles.len());
        let rest: Vec<&str> = lines.collect();
        assert_eq!(rest.len(), m.vertices.len() + m.triangles.len());
        // Vertices round-trip through the shortest-float formatting.
        let first: Vec<f64> = rest[0]
            .split_whitespace()
            .map(|w| w.parse().unwrap())
            .collect();
        assert_eq!(Vec3::new(first[0], first[1], first[2]), m.vertices[0]);
        // Every face line is a triangle with in-range indices.
        for f in &rest[m.vertices.len()..] {
            let idx: Vec<usize> = f.split_whitespace().map(|w| w.parse().unwrap()).collect();
            assert_eq!(idx[0], 3);
            assert!(idx[1..].iter().all(|&i| i < m.vertices.len()));
        }
    }

    #[test]
    fn transformed_rotates_vertices() {
        let m = TriMesh::box_mesh(0.02, 0.04, 0.06).unwrap();
        let pose = Pose::new(
            crate::geometry::Quaternion::from_axis_angle(
                Vec3::new(0.0, 1.0, 0.0),
                std::f64::consts::PI / 2.0,
            ),
            Vec3::new(0.0, 0.0, 0.1),
        );
        let t = m.transformed(&pose);
        // Rotation about y swaps the x and z extents.
        let bb = t.aabb();
        assert_relative_eq!(bb.max.x - bb.min.x, 0.06, epsilon = 1e-12);
        assert_relative_eq!(bb.max.z - bb.min.z, 0.02, epsilon = 1e-12);
        assert_relative_eq!(bb.center().z, 0.1, epsilon = 1e-12);
    }
}
