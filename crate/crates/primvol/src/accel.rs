//! BVH over oriented primitive boxes. Delivers per-ray entry/exit intervals
//! so the integrator only samples occupied space.

use crate::geom::{Ray, Vec3};
use crate::scene::PrimitiveSet;

/// Axis-aligned box, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub const EMPTY: Aabb = Aabb {
        lo: Vec3 { x: f64::INFINITY, y: f64::INFINITY, z: f64::INFINITY },
        hi: Vec3 { x: f64::NEG_INFINITY, y: f64::NEG_INFINITY, z: f64::NEG_INFINITY },
    };

    pub fn union(self, o: Aabb) -> Aabb {
        Aabb { lo: self.lo.min_comp(o.lo), hi: self.hi.max_comp(o.hi) }
    }

    pub fn contains_box(&self, o: &Aabb) -> bool {
        self.lo.x <= o.lo.x
            && self.lo.y <= o.lo.y
            && self.lo.z <= o.lo.z
            && self.hi.x >= o.hi.x
            && self.hi.y >= o.hi.y
            && self.hi.z >= o.hi.z
    }

    pub fn centroid(&self) -> Vec3 {
        (self.lo + self.hi) * 0.5
    }

    /// Does the ray's [t_min, t_max] segment touch the box?
    pub fn hit_by(&self, ray: &Ray) -> bool {
        let mut t0 = ray.t_min;
        let mut t1 = ray.t_max;
        for axis in 0..3 {
            let o = ray.origin.component(axis);
            let d = ray.direction.component(axis);
            let lo = self.lo.component(axis);
            let hi = self.hi.component(axis);
            if d == 0.0 {
                if o < lo || o > hi {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (near, far) = if inv >= 0.0 {
                ((lo - o) * inv, (hi - o) * inv)
            } else {
                ((hi - o) * inv, (lo - o) * inv)
            };
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

/// World-space AABB of an oriented box: center t, rotation R, half-extents s.
/// Along world axis i the half-extent is sum_j |R_ij| * s_j.
pub fn primitive_aabb(prim: &crate::scene::Primitive) -> Aabb {
    let r = prim.rotation.to_matrix();
    let s = prim.scale;
    let half = Vec3::new(
        r.rows[0][0].abs() * s.x + r.rows[0][1].abs() * s.y + r.rows[0][2].abs() * s.z,
        r.rows[1][0].abs() * s.x + r.rows[1][1].abs() * s.y + r.rows[1][2].abs() * s.z,
        r.rows[2][0].abs() * s.x + r.rows[2][1].abs() * s.y + r.rows[2][2].abs() * s.z,
    );
    Aabb { lo: prim.position - half, hi: prim.position + half }
}

#[derive(Debug, Clone)]
enum NodeKind {
    /// Children indices into `Bvh::nodes`.
    Internal(u32, u32),
    /// Range into `Bvh::prim_order`.
    Leaf { start: u32, count: u32 },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Median-split BVH, leaf size 1-2, deterministic for fixed input.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    prim_order: Vec<u32>,
}

pub fn build_bvh(scene: &PrimitiveSet) -> Bvh {
    let boxes: Vec<Aabb> = scene.primitives.iter().map(primitive_aabb).collect();
    let mut order: Vec<u32> = (0..scene.len() as u32).collect();
    let mut nodes = Vec::with_capacity(2 * scene.len());
    build_node(&boxes, &mut order, 0, scene.len(), &mut nodes);
    Bvh { nodes, prim_order: order }
}

fn build_node(
    boxes: &[Aabb],
    order: &mut [u32],
    start: usize,
    count: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let slice = &order[start..start + count];
    let bounds = slice
        .iter()
        .fold(Aabb::EMPTY, |acc, &i| acc.union(boxes[i as usize]));
    let this = nodes.len() as u32;
    nodes.push(Node { bounds, kind: NodeKind::Leaf { start: start as u32, count: count as u32 } });
    if count <= 2 {
        return this;
    }
    // split at the median along the largest centroid extent (ties -> lower axis)
    let centroid_bounds = slice.iter().fold(Aabb::EMPTY, |acc, &i| {
        let c = boxes[i as usize].centroid();
        acc.union(Aabb { lo: c, hi: c })
    });
    let extent = centroid_bounds.hi - centroid_bounds.lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let segment = &mut order[start..start + count];
    segment.sort_by(|&a, &b| {
        let ca = boxes[a as usize].centroid().component(axis);
        let cb = boxes[b as usize].centroid().component(axis);
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });
    let mid = count / 2;
    let left = build_node(boxes, order, start, mid, nodes);
    let right = build_node(boxes, order, start + mid, count - mid, nodes);
    nodes[this as usize].kind = NodeKind::Internal(left, right);
    this
}

/// One primitive crossing: the ray parameter interval inside its box,
/// clipped to the ray bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitInterval {
    pub prim: u32,
    pub t_enter: f64,
    pub t_exit: f64,
}

/// Hit intervals sorted by t_enter (ties by primitive index).
pub type RayHitList = Vec<HitInterval>;

/// Slab test against one primitive's oriented box. The ray is expressed in
/// the primitive's local frame without renormalizing, so the t parameter is
/// preserved.
pub fn intersect_primitive(
    ray: &Ray,
    prim: &crate::scene::Primitive,
) -> Option<(f64, f64)> {
    let rt = prim.rotation.to_matrix().transpose();
    let o = rt.mul_vec(ray.origin - prim.position).div_comp(prim.scale);
    let d = rt.mul_vec(ray.direction).div_comp(prim.scale);
    let mut t0 = ray.t_min;
    let mut t1 = ray.t_max;
    for axis in 0..3 {
        let oc = o.component(axis);
        let dc = d.component(axis);
        if dc == 0.0 {
            if oc.abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dc;
        let (near, far) = if inv >= 0.0 {
            ((-1.0 - oc) * inv, (1.0 - oc) * inv)
        } else {
            ((1.0 - oc) * inv, (-1.0 - oc) * inv)
        };
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    // positive-length intervals only
    if t0 < t1 {
        Some((t0, t1))
    } else {
        None
    }
}

/// BVH-accelerated ray intersection: every primitive whose oriented box the
/// ray crosses within its bounds, sorted by entry.
pub fn intersect(ray: &Ray, scene: &PrimitiveSet, bvh: &Bvh) -> RayHitList {
    let mut hits = Vec::new();
    let mut stack = vec![0u32];
    while let Some(ni) = stack.pop() {
        let node = &bvh.nodes[ni as usize];
        if !node.bounds.hit_by(ray) {
            continue;
        }
        match node.kind {
            NodeKind::Internal(l, r) => {
                stack.push(r);
                stack.push(l);
            }
            NodeKind::Leaf { start, count } => {
                for &prim in &bvh.prim_order[start as usize..(start + count) as usize] {
                    if let Some((t_enter, t_exit)) =
                        intersect_primitive(ray, &scene.primitives[prim as usize])
                    {
                        hits.push(HitInterval { prim, t_enter, t_exit });
                    }
                }
            }
        }
    }
    sort_hits(&mut hits);
    hits
}

/// Reference implementation: slab-test every primitive.
pub fn intersect_brute(ray: &Ray, scene: &PrimitiveSet) -> RayHitList {
    let mut hits = Vec::new();
    for (k, prim) in scene.primitives.iter().enumerate() {
        if let Some((t_enter, t_exit)) = intersect_primitive(ray, prim) {
            hits.push(HitInterval { prim: k as u32, t_enter, t_exit });
        }
    }
    sort_hits(&mut hits);
    hits
}

fn sort_hits(hits: &mut RayHitList) {
    hits.sort_by(|a, b| {
        a.t_enter
            .partial_cmp(&b.t_enter)
            .unwrap()
            .then(a.prim.cmp(&b.prim))
    });
}
