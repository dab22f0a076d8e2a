use super::{Aabb, TriMesh, Vec3};

/// Bounding-volume hierarchy over a triangle soup. Triangles are stored
/// reordered for locality; `tri_index` maps slots back to mesh order.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<[Vec3; 3]>,
    tri_index: Vec<u32>,
}

#[derive(Debug, Clone)]
struct Node {
    aabb: Aabb,
    // Leaf when count > 0: `a` is the first triangle slot. Internal
    // otherwise: `a` and `b` are child node indices.
    a: u32,
    b: u32,
    count: u32,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(vertices: &[Vec3], triangles: &[[u32; 3]]) -> Bvh {
        let mut tris: Vec<[Vec3; 3]> = triangles
            .iter()
            .map(|t| {
                [
                    vertices[t[0] as usize],
                    vertices[t[1] as usize],
                    vertices[t[2] as usize],
                ]
            })
            .collect();
        let mut tri_index: Vec<u32> = (0..triangles.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len().max(1));
        let n = tris.len();
        build_node(&mut nodes, &mut tris, &mut tri_index, 0, n);
        Bvh { nodes, tris, tri_index }
    }

    pub fn root_aabb(&self) -> Aabb {
        self.nodes[0].aabb
    }

    /// Nearest triangle hit along `dir` (unit length) with `t` in
    /// `(t_min, t_max)`. Returns `(t, triangle index in mesh order)`.
    pub fn ray_nearest(
        &self,
        origin: Vec3,
        dir: Vec3,
        t_min: f64,
        t_max: f64,
    ) -> Option<(f64, usize)> {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<(f64, usize)> = None;
        let mut best_t = t_max;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !node.aabb.ray_intersects(origin, inv, best_t) {
                continue;
            }
            if node.count > 0 {
                for slot in node.a..node.a + node.count {
                    if let Some(t) = ray_triangle(origin, dir, &self.tris[slot as usize]) {
                        if t > t_min && t < best_t {
                            best_t = t;
                            best = Some((t, self.tri_index[slot as usize] as usize));
                        }
                    }
                }
            } else {
                stack[sp] = node.a;
                stack[sp + 1] = node.b;
                sp += 2;
            }
        }
        best
    }

    /// Visit triangles whose bounding boxes overlap `query`; the callback
    /// returns true to stop early. Returns whether it stopped early.
    pub fn for_each_in_aabb(&self, query: &Aabb, f: &mut impl FnMut(usize, &[Vec3; 3]) -> bool) -> bool {
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        stack[sp] = 0;
        sp += 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if !node.aabb.intersects(query) {
                continue;
            }
            if node.count > 0 {
                for slot in node.a..node.a + node.count {
                    let tri = &self.tris[slot as usize];
                    let ta = Aabb::from_points(tri.iter().copied());
                    if ta.intersects(query) && f(self.tri_index[slot as usize] as usize, tri) {
                        return true;
                    }
                }
            } else {
                stack[sp] = node.a;
                stack[sp + 1] = node.b;
                sp += 2;
            }
        }
        false
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    tris: &mut [ [Vec3; 3] ],
    tri_index: &mut [u32],
    start: usize,
    count: usize,
) -> u32 {
    let mut aabb = Aabb::EMPTY;
    for t in &tris[start..start + count] {
        for &v in t {
            aabb.expand(v);
        }
    }
    let idx = nodes.len() as u32;
    nodes.push(Node { aabb, a: start as u32, b: 0, count: count as u32 });
    if count <= LEAF_SIZE {
        return idx;
    }
    let axis = aabb.longest_axis();
    let mid = start + count / 2;
    // Median split by centroid; sort_unstable keeps the build deterministic
    // because centroid keys tie only for identical triangles.
    let range = &mut tris[start..start + count];
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_unstable_by(|&i, &j| {
        let ci = centroid_axis(&range[i], axis);
        let cj = centroid_axis(&range[j], axis);
        ci.partial_cmp(&cj).unwrap().then(i.cmp(&j))
    });
    apply_permutation(range, &mut tri_index[start..start + count], &order);

    let left = build_node(nodes, tris, tri_index, start, mid - start);
    let right = build_node(nodes, tris, tri_index, mid, start + count - mid);
    nodes[idx as usize].a = left;
    nodes[idx as usize].b = right;
    nodes[idx as usize].count = 0;
    idx
}

fn centroid_axis(t: &[Vec3; 3], axis: usize) -> f64 {
    (t[0].axis(axis) + t[1].axis(axis) + t[2].axis(axis)) / 3.0
}

fn apply_permutation(tris: &mut [[Vec3; 3]], idx: &mut [u32], order: &[usize]) {
    let tmp_t: Vec<[Vec3; 3]> = order.iter().map(|&i| tris[i]).collect();
    let tmp_i: Vec<u32> = order.iter().map(|&i| idx[i]).collect();
    tris.copy_from_slice(&tmp_t);
    idx.copy_from_slice(&tmp_i);
}

/// Moller-Trumbore with slightly inclusive barycentric bounds.
fn ray_triangle(origin: Vec3, dir: Vec3, tri: &[Vec3; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(e2);
    let det = e1.dot(p);
    if det.abs() < 1e-16 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(p) * inv;
    if !(-1e-9..=1.0 + 1e-9).contains(&u) {
        return None;
    }
    let q = s.cross(e1);
    let v = dir.dot(q) * inv;
    if v < -1e-9 || u + v > 1.0 + 1e-9 {
        return None;
    }
    Some(e2.dot(q) * inv)
}

/// A ray hit in world space. `normal` is unit length and faces the ray
/// origin (`normal . dir <= 0`).
#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub distance: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub mesh: usize,
    pub tri: usize,
}

/// Nearest hit over a set of meshes. `dir` is normalized internally so the
/// reported distance is metric.
pub fn ray_cast(meshes: &[&TriMesh], origin: Vec3, dir: Vec3) -> Option<RayHit> {
    let dir = dir.normalized()?;
    let mut best: Option<RayHit> = None;
    let mut t_max = f64::INFINITY;
    for (mi, mesh) in meshes.iter().enumerate() {
        if let Some((t, tri)) = mesh.bvh().ray_nearest(origin, dir, 1e-9, t_max) {
            t_max = t;
            let verts = mesh.tri(tri);
            let mut normal = (verts[1] - verts[0])
                .cross(verts[2] - verts[0])
                .normalized()
                .unwrap_or(Vec3::new(0.0, 0.0, 1.0));
            if normal.dot(dir) > 0.0 {
                normal = -normal;
            }
            best = Some(RayHit {
                distance: t,
                point: origin + dir * t,
                normal,
                mesh: mi,
                tri,
            });
        }
    }
    best
}

/// Point containment for watertight, outward-wound meshes: look at the
/// nearest surface along a fixed direction; seeing a back face means the
/// point is inside. More robust than hit-parity at shared edges.
pub fn mesh_contains(mesh: &TriMesh, point: Vec3) -> bool {
    // Direction chosen to avoid axis-aligned edges of generated meshes.
    let dir = Vec3::new(0.540716154, 0.631950024, 0.555222011);
    match mesh.bvh().ray_nearest(point, dir, 1e-12, f64::INFINITY) {
        None => false,
        Some((_, tri)) => {
            let v = mesh.tri(tri);
            let n = (v[1] - v[0]).cross(v[2] - v[0]);
            n.dot(dir) > 0.0
        }
    }
}

/// Inclusive segment-triangle intersection test.
fn segment_hits_triangle(p: Vec3, q: Vec3, tri: &[Vec3; 3]) -> bool {
    let dir = q - p;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pv = dir.cross(e2);
    let det = e1.dot(pv);
    if det.abs() < 1e-18 {
        return false; // parallel; coplanar overlap handled by the caller
    }
    let inv = 1.0 / det;
    let s = p - tri[0];
    let u = s.dot(pv) * inv;
    if !(-1e-9..=1.0 + 1e-9).contains(&u) {
        return false;
    }
    let qv = s.cross(e1);
    let v = dir.dot(qv) * inv;
    if v < -1e-9 || u + v > 1.0 + 1e-9 {
        return false;
    }
    let t = e2.dot(qv) * inv;
    (-1e-9..=1.0 + 1e-9).contains(&t)
}

fn dominant_axis(n: Vec3) -> usize {
    let (ax, ay, az) = (n.x.abs(), n.y.abs(), n.z.abs());
    if ax >= ay && ax >= az {
        0
    } else if ay >= az {
        1
    } else {
        2
    }
}

fn project_2d(v: Vec3, drop: usize) -> (f64, f64) {
    match drop {
        0 => (v.y, v.z),
        1 => (v.z, v.x),
        _ => (v.x, v.y),
    }
}

fn segs_intersect_2d(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let orient = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
        (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
    };
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 <= 0.0 && o3 * o4 <= 0.0 && (o1 != o2 || o3 != o4)
}

fn point_in_tri_2d(p: (f64, f64), t: &[(f64, f64); 3]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
    };
    let d1 = sign(p, t[0], t[1]);
    let d2 = sign(p, t[1], t[2]);
    let d3 = sign(p, t[2], t[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Triangle-triangle intersection, including the coplanar case.
pub fn tri_tri_intersect(a: &[Vec3; 3], b: &[Vec3; 3]) -> bool {
    for k in 0..3 {
        if segment_hits_triangle(a[k], a[(k + 1) % 3], b)
            || segment_hits_triangle(b[k], b[(k + 1) % 3], a)
        {
            return true;
        }
    }
    // Non-coplanar intersections always involve an edge crossing, so only
    // the coplanar overlap remains.
    let n = (b[1] - b[0]).cross(b[2] - b[0]);
    let scale = n.norm();
    if scale < 1e-18 {
        return false;
    }
    let eps = 1e-9 * scale.sqrt().max(1e-6);
    if a.iter().any(|&v| (v - b[0]).dot(n).abs() / scale > eps) {
        return false;
    }
    let axis = dominant_axis(n);
    let a2 = [
        project_2d(a[0], axis),
        project_2d(a[1], axis),
        project_2d(a[2], axis),
    ];
    let b2 = [
        project_2d(b[0], axis),
        project_2d(b[1], axis),
        project_2d(b[2], axis),
    ];
    for i in 0..3 {
        for j in 0..3 {
            if segs_intersect_2d(a2[i], a2[(i + 1) % 3], b2[j], b2[(j + 1) % 3]) {
                return true;
            }
        }
    }
    point_in_tri_2d(a2[0], &b2) || point_in_tri_2d(b2[0], &a2)
}

/// Solid overlap test: surface intersection or full containment.
pub fn meshes_intersect(a: &TriMesh, b: &TriMesh) -> bool {
    if !a.aabb().intersects(&b.aabb()) {
        return false;
    }
    let (small, big) = if a.triangles.len() <= b.triangles.len() {
        (a, b)
    } else {
        (b, a)
    };
    for i in 0..small.triangles.len() {
        let tri = small.tri(i);
        let query = Aabb::from_points(tri.iter().copied());
        let hit = big
            .bvh()
            .for_each_in_aabb(&query, &mut |_, other| tri_tri_intersect(&tri, other));
        if hit {
            return true;
        }
    }
    mesh_contains(big, small.vertices[0]) || mesh_contains(small, big.vertices[0])
}

/// Overlap test for `a` translated by `offset` against `b`, without
/// rebuilding any acceleration structure. Lets placement search probe many
/// positions of one rotated mesh cheaply.
pub fn mesh_intersects_at(a: &TriMesh, offset: Vec3, b: &TriMesh) -> bool {
    let shifted = {
        let e = a.aabb();
        Aabb { min: e.min + offset, max: e.max + offset }
    };
    if !shifted.intersects(&b.aabb()) {
        return false;
    }
    for i in 0..a.triangles.len() {
        let mut tri = a.tri(i);
        for v in tri.iter_mut() {
            *v = *v + offset;
        }
        let query = Aabb::from_points(tri.iter().copied());
        let hit = b
            .bvh()
            .for_each_in_aabb(&query, &mut |_, other| tri_tri_intersect(&tri, other));
        if hit {
            return true;
        }
    }
    mesh_contains(b, a.vertices[0] + offset) || mesh_contains(a, b.vertices[0] - offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TriMesh;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ray_onto_sphere_matches_analytic_distance() {
        let r = 0.03;
        let mesh = TriMesh::icosphere(r, 3).unwrap();
        let origin = Vec3::new(0.0, 0.0, 0.5);
        let hit = ray_cast(&[&mesh], origin, Vec3::new(0.0, 0.0, -1.0)).unwrap();
        // The pole vertex is exact; the surrounding facets dip slightly
        // below the sphere, bounded by the sagitta of one subdivided face.
        assert_relative_eq!(hit.distance, 0.5 - r, epsilon = 2e-4);
        assert!(hit.normal.dot(Vec3::new(0.0, 0.0, -1.0)) < 0.0);
        // The hit facet touches the pole, so its normal tilts from +z by
        // about half the facet's angular extent.
        assert!((hit.normal - Vec3::new(0.0, 0.0, 1.0)).norm() < 0.15);
    }

    #[test]
    fn ray_misses_when_pointed_away() {
        let mesh = TriMesh::box_mesh(0.1, 0.1, 0.1).unwrap();
        let hit = ray_cast(&[&mesh], Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 0.0, 1.0));
        assert!(hit.is_none());
    }

    #[test]
    fn bvh_agrees_with_brute_force() {
        let mesh = TriMesh::icosphere(0.05, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let origin = Vec3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            );
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let Some(dir) = dir.normalized() else { continue };
            let bvh_hit = mesh.bvh().ray_nearest(origin, dir, 1e-9, f64::INFINITY);
            let mut brute: Option<(f64, usize)> = None;
            for i in 0..mesh.triangles.len() {
                if let Some(t) = super::ray_triangle(origin, dir, &mesh.tri(i)) {
                    if t > 1e-9 && brute.map_or(true, |(bt, _)| t < bt) {
                        brute = Some((t, i));
                    }
                }
            }
            match (bvh_hit, brute) {
                (None, None) => {}
                (Some((t1, _)), Some((t2, _))) => assert_relative_eq!(t1, t2, epsilon = 1e-12),
                other => panic!("bvh and brute force disagree: {other:?}"),
            }
        }
    }

    #[test]
    fn containment_for_box() {
        let mesh = TriMesh::box_mesh(0.1, 0.1, 0.1).unwrap();
        assert!(mesh_contains(&mesh, Vec3::ZERO));
        assert!(mesh_contains(&mesh, Vec3::new(0.049, 0.0, 0.0)));
        assert!(!mesh_contains(&mesh, Vec3::new(0.051, 0.0, 0.0)));
        assert!(!mesh_contains(&mesh, Vec3::new(0.2, 0.2, 0.2)));
    }

    #[test]
    fn tri_tri_crossing_and_separation() {
        let a = [
            Vec3::new(-1.0, -1.0, 0.0),
            Vec3::new(1.0, -1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let crossing = [
            Vec3::new(0.0, -0.5, -1.0),
            Vec3::new(0.0, 0.5, 1.0),
            Vec3::new(0.0, -0.5, 1.0),
        ];
        assert!(tri_tri_intersect(&a, &crossing));
        let above = [
            Vec3::new(-1.0, -1.0, 0.5),
            Vec3::new(1.0, -1.0, 0.5),
            Vec3::new(0.0, 1.0, 0.5),
        ];
        assert!(!tri_tri_intersect(&a, &above));
        // Coplanar containment: a small triangle strictly inside `a`.
        let inside = [
            Vec3::new(-0.1, -0.5, 0.0),
            Vec3::new(0.1, -0.5, 0.0),
            Vec3::new(0.0, -0.3, 0.0),
        ];
        assert!(tri_tri_intersect(&a, &inside));
    }

    #[test]
    fn mesh_overlap_separated_touching_contained() {
        let a = TriMesh::box_mesh(0.04, 0.04, 0.04).unwrap();
        let b = a.translated(Vec3::new(0.1, 0.0, 0.0));
        assert!(!meshes_intersect(&a, &b));
        let overlapping = a.translated(Vec3::new(0.02, 0.0, 0.0));
        assert!(meshes_intersect(&a, &overlapping));
        let inner = TriMesh::box_mesh(0.01, 0.01, 0.01).unwrap();
        assert!(meshes_intersect(&a, &inner));
    }
}
