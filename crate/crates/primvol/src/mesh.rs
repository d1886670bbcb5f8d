//! Guide mesh loading and primitive anchoring.
//!
//! A guide mesh is a UV-mapped triangle mesh. Primitives are anchored to it
//! on a regular UV grid: each grid cell center is looked up in UV space,
//! the containing triangle supplies a surface point (anchor position) and a
//! tangent frame (anchor orientation).

use crate::geom::{Mat3, Rotation, Vec3};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to read mesh file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mesh has no texture coordinates (vt records)")]
    NoUv,
    #[error("line {line}: index {index} out of range (have {count})")]
    IndexOutOfRange { line: usize, index: isize, count: usize },
    #[error("mesh has no faces")]
    Empty,
    #[error("face {0} has a degenerate UV triangle (area {1:.3e})")]
    DegenerateUv(usize, f64),
    #[error("no UV grid cell is covered by any triangle")]
    NoCoveredCells,
    #[error("grid side must be >= 1")]
    BadGridSide,
}

/// One face corner: indices into the position and UV arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corner {
    pub position: usize,
    pub uv: usize,
}

/// Validated UV-mapped triangle mesh.
#[derive(Debug, Clone)]
pub struct GuideMesh {
    pub positions: Vec<Vec3>,
    pub uvs: Vec<(f64, f64)>,
    pub faces: Vec<[Corner; 3]>,
}

impl GuideMesh {
    /// Validate index ranges, non-emptiness, and UV triangle areas.
    pub fn validate(&self) -> Result<(), MeshError> {
        if self.faces.is_empty() {
            return Err(MeshError::Empty);
        }
        if self.uvs.is_empty() {
            return Err(MeshError::NoUv);
        }
        for (fi, face) in self.faces.iter().enumerate() {
            for c in face {
                if c.position >= self.positions.len() {
                    return Err(MeshError::IndexOutOfRange {
                        line: 0,
                        index: c.position as isize,
                        count: self.positions.len(),
                    });
                }
                if c.uv >= self.uvs.len() {
                    return Err(MeshError::IndexOutOfRange {
                        line: 0,
                        index: c.uv as isize,
                        count: self.uvs.len(),
                    });
                }
            }
            let area = self.uv_area(fi).abs();
            if area <= 1e-12 {
                return Err(MeshError::DegenerateUv(fi, area));
            }
        }
        Ok(())
    }

    fn uv_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        let (au, av) = self.uvs[a.uv];
        let (bu, bv) = self.uvs[b.uv];
        let (cu, cv) = self.uvs[c.uv];
        0.5 * ((bu - au) * (cv - av) - (cu - au) * (bv - av))
    }

    /// Axis-aligned bounding box of all vertex positions.
    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::splat(f64::INFINITY);
        let mut hi = Vec3::splat(f64::NEG_INFINITY);
        for p in &self.positions {
            lo = lo.min_comp(*p);
            hi = hi.max_comp(*p);
        }
        (lo, hi)
    }
}

/// Parse an OBJ-subset mesh: `v`, `vt` and triangulated `f` records with
/// `pos/uv` or `pos/uv/normal` corners. Normals and materials are ignored.
pub fn load_mesh(path: &Path) -> Result<GuideMesh, MeshError> {
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text)
}

pub fn parse_obj(text: &str) -> Result<GuideMesh, MeshError> {
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    let mut faces: Vec<[Corner; 3]> = Vec::new();
    let mut saw_slashless_face = None;

    for (li, raw) in text.lines().enumerate() {
        let line_no = li + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap();
        match tag {
            "v" => {
                let v = parse_floats::<3>(parts, line_no, "v")?;
                positions.push(Vec3::new(v[0], v[1], v[2]));
            }
            "vt" => {
                let v = parse_floats::<2>(parts, line_no, "vt")?;
                uvs.push((v[0], v[1]));
            }
            "f" => {
                let corners: Vec<&str> = parts.collect();
                if corners.len() != 3 {
                    return Err(MeshError::Parse {
                        line: line_no,
                        msg: format!(
                            "face has {} corners; only triangles are supported",
                            corners.len()
                        ),
                    });
                }
                let mut face = [Corner { position: 0, uv: 0 }; 3];
                for (ci, text) in corners.iter().enumerate() {
                    let mut fields = text.split('/');
                    let pos_str = fields.next().unwrap_or("");
                    let uv_str = fields.next();
                    let pos = resolve_index(pos_str, positions.len(), line_no)?;
                    let uv = match uv_str {
                        Some(s) if !s.is_empty() => resolve_index(s, uvs.len(), line_no)?,
                        _ => {
                            // remember we saw a face without UVs; report NoUv
                            // only if the file has no vt records at all,
                            // otherwise it is a malformed face
                            saw_slashless_face.get_or_insert(line_no);
                            0
                        }
                    };
                    face[ci] = Corner { position: pos, uv };
                }
                faces.push(face);
            }
            // normals, materials, objects, groups, smoothing
            "vn" | "mtllib" | "usemtl" | "o" | "g" | "s" => {}
            _ => {
                return Err(MeshError::Parse {
                    line: line_no,
                    msg: format!("unrecognized record '{tag}'"),
                });
            }
        }
    }

    if uvs.is_empty() {
        return Err(MeshError::NoUv);
    }
    if let Some(line) = saw_slashless_face {
        return Err(MeshError::Parse {
            line,
            msg: "face corner lacks a UV index (expected pos/uv)".into(),
        });
    }
    let mesh = GuideMesh { positions, uvs, faces };
    mesh.validate()?;
    Ok(mesh)
}

fn parse_floats<const N: usize>(
    mut parts: std::str::SplitWhitespace,
    line: usize,
    tag: &str,
) -> Result<[f64; N], MeshError> {
    let mut out = [0.0; N];
    for (i, slot) in out.iter_mut().enumerate() {
        let tok = parts.next().ok_or_else(|| MeshError::Parse {
            line,
            msg: format!("'{tag}' record needs {N} numbers, got {i}"),
        })?;
        *slot = tok.parse().map_err(|_| MeshError::Parse {
            line,
            msg: format!("'{tok}' is not a number"),
        })?;
    }
    Ok(out)
}

/// Resolve a 1-based (possibly negative, counting from the end) OBJ index.
fn resolve_index(tok: &str, count: usize, line: usize) -> Result<usize, MeshError> {
    let idx: isize = tok.parse().map_err(|_| MeshError::Parse {
        line,
        msg: format!("'{tok}' is not an index"),
    })?;
    let resolved = if idx > 0 {
        idx as usize - 1
    } else if idx < 0 && (-idx) as usize <= count {
        count - (-idx) as usize
    } else {
        return Err(MeshError::IndexOutOfRange { line, index: idx, count });
    };
    if resolved >= count {
        return Err(MeshError::IndexOutOfRange { line, index: idx, count });
    }
    Ok(resolved)
}

// ---------------------------------------------------------------------------
// Anchoring

/// Per-primitive rest pose derived from the guide mesh, plus the shared base
/// scale. Index k of the anchor under UV cell (i, j) is `j * g + i`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub grid_side: u32,
    pub t_hat: Vec<Vec3>,
    pub r_hat: Vec<Rotation>,
    /// Shared base scale, world units per local unit.
    pub s_hat: Vec3,
    /// False where the UV cell was uncovered and the anchor was inherited.
    pub covered: Vec<bool>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.t_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_hat.is_empty()
    }
}

/// Barycentric coordinates of `p` in UV triangle (a, b, c), or None if the
/// triangle is (near-)degenerate.
fn barycentric_uv(
    a: (f64, f64),
    b: (f64, f64),
    c: (f64, f64),
    p: (f64, f64),
) -> Option<(f64, f64, f64)> {
    let v0 = (b.0 - a.0, b.1 - a.1);
    let v1 = (c.0 - a.0, c.1 - a.1);
    let v2 = (p.0 - a.0, p.1 - a.1);
    let denom = v0.0 * v1.1 - v1.0 * v0.1;
    if denom.abs() <= 1e-12 {
        return None;
    }
    let beta = (v2.0 * v1.1 - v1.0 * v2.1) / denom;
    let gamma = (v0.0 * v2.1 - v2.0 * v0.1) / denom;
    Some((1.0 - beta - gamma, beta, gamma))
}

/// Tangent frame of a face: columns (tangent du, bitangent, normal).
fn face_frame(mesh: &GuideMesh, face: usize) -> Rotation {
    let [ca, cb, cc] = mesh.faces[face];
    let p0 = mesh.positions[ca.position];
    let p1 = mesh.positions[cb.position];
    let p2 = mesh.positions[cc.position];
    let (u0, v0) = mesh.uvs[ca.uv];
    let (u1, v1) = mesh.uvs[cb.uv];
    let (u2, v2) = mesh.uvs[cc.uv];

    let e1 = p1 - p0;
    let e2 = p2 - p0;
    let normal = e1.cross(e2).normalized();
    let (du1, dv1) = (u1 - u0, v1 - v0);
    let (du2, dv2) = (u2 - u0, v2 - v0);
    let det = du1 * dv2 - du2 * dv1;
    // direction of increasing u on the surface; UV area was validated > 0
    let raw_tangent = (e1 * dv2 - e2 * dv1) * (1.0 / det);
    let mut tangent = raw_tangent - normal * raw_tangent.dot(normal);
    if tangent.norm() < 1e-12 {
        // u-isolines collapse on this face; fall back to any in-plane axis
        tangent = e1 - normal * e1.dot(normal);
    }
    let tangent = tangent.normalized();
    let bitangent = normal.cross(tangent);
    let m = Mat3::from_cols(tangent, bitangent, normal);
    Rotation::from_matrix(&m).expect("orthonormal frame by construction")
}

/// Anchor one primitive per UV grid cell: cell centers are looked up in UV
/// space, covered cells take the surface point and tangent frame of the first
/// containing triangle, uncovered cells inherit the nearest covered cell
/// (squared UV distance; ties resolved toward the lower cell index).
pub fn anchor_primitives(mesh: &GuideMesh, grid_side: u32) -> Result<AnchorSet, MeshError> {
    if grid_side == 0 {
        return Err(MeshError::BadGridSide);
    }
    mesh.validate()?;
    let g = grid_side as usize;
    let n = g * g;
    let mut t_hat = vec![Vec3::ZERO; n];
    let mut r_hat = vec![Rotation::IDENTITY; n];
    let mut covered = vec![false; n];

    for j in 0..g {
        for i in 0..g {
            let k = j * g + i;
            let u = (i as f64 + 0.5) / grid_side as f64;
            let v = (j as f64 + 0.5) / grid_side as f64;
            for (fi, face) in mesh.faces.iter().enumerate() {
                let a = mesh.uvs[face[0].uv];
                let b = mesh.uvs[face[1].uv];
                let c = mesh.uvs[face[2].uv];
                let Some((wa, wb, wc)) = barycentric_uv(a, b, c, (u, v)) else {
                    continue;
                };
                if wa >= -1e-12 && wb >= -1e-12 && wc >= -1e-12 {
                    let p0 = mesh.positions[face[0].position];
                    let p1 = mesh.positions[face[1].position];
                    let p2 = mesh.positions[face[2].position];
                    t_hat[k] = p0 * wa + p1 * wb + p2 * wc;
                    r_hat[k] = face_frame(mesh, fi);
                    covered[k] = true;
                    break;
                }
            }
        }
    }

    if !covered.iter().any(|&c| c) {
        return Err(MeshError::NoCoveredCells);
    }

    // uncovered cells inherit the nearest covered cell's anchor
    let cell_center = |k: usize| {
        let i = k % g;
        let j = k / g;
        (
            (i as f64 + 0.5) / grid_side as f64,
            (j as f64 + 0.5) / grid_side as f64,
        )
    };
    for k in 0..n {
        if covered[k] {
            continue;
        }
        let (u, v) = cell_center(k);
        let mut best = usize::MAX;
        let mut best_d2 = f64::INFINITY;
        for (src, &src_covered) in covered.iter().enumerate() {
            if !src_covered {
                continue;
            }
            let (su, sv) = cell_center(src);
            let d2 = (su - u) * (su - u) + (sv - v) * (sv - v);
            if d2 < best_d2 {
                best_d2 = d2;
                best = src;
            }
        }
        t_hat[k] = t_hat[best];
        r_hat[k] = r_hat[best];
    }

    let (lo, hi) = mesh.bbox();
    let diag = (hi - lo).norm();
    let s = (diag / (3.0 * grid_side as f64)).max(1e-6);
    Ok(AnchorSet {
        grid_side,
        t_hat,
        r_hat,
        s_hat: Vec3::splat(s),
        covered,
    })
}

// ---------------------------------------------------------------------------
// Procedural meshes (tests, datasets)

/// Unit quad in the z=0 plane: corners (0,0,0)..(1,1,0), UVs matching xy.
pub fn unit_quad() -> GuideMesh {
    let positions = vec![
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(1.0, 1.0, 0.0),
        Vec3::new(0.0, 1.0, 0.0),
    ];
    let uvs = vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let c = |i: usize| Corner { position: i, uv: i };
    let faces = vec![[c(0), c(1), c(2)], [c(0), c(2), c(3)]];
    GuideMesh { positions, uvs, faces }
}

/// UV sphere of `radius` centered at the origin. Latitude rings sit at
/// v = (i + 0.5)/rings so no vertex degenerates at a pole; the thin UV bands
/// near v = 0 and v = 1 are uncovered and exercise anchor inheritance.
pub fn uv_sphere(radius: f64, rings: u32, segments: u32) -> GuideMesh {
    assert!(rings >= 2 && segments >= 3);
    let mut positions = Vec::new();
    let mut uvs = Vec::new();
    for i in 0..=rings {
        // squeeze v into (0,1) so every UV triangle keeps positive area
        let v = (i as f64 + 0.5) / (rings as f64 + 1.0);
        let theta = std::f64::consts::PI * v;
        for j in 0..=segments {
            let u = j as f64 / segments as f64;
            let phi = 2.0 * std::f64::consts::PI * u;
            positions.push(Vec3::new(
                radius * theta.sin() * phi.cos(),
                radius * theta.cos(),
                radius * theta.sin() * phi.sin(),
            ));
            uvs.push((u, v));
        }
    }
    let stride = segments as usize + 1;
    let mut faces = Vec::new();
    for i in 0..rings as usize {
        for j in 0..segments as usize {
            let a = i * stride + j;
            let b = a + 1;
            let c = a + stride;
            let d = c + 1;
            let corner = |i: usize| Corner { position: i, uv: i };
            faces.push([corner(a), corner(b), corner(d)]);
            faces.push([corner(a), corner(d), corner(c)]);
        }
    }
    GuideMesh { positions, uvs, faces }
}

/// Distance from a point to a triangle (used by surface-distance checks).
pub fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    // project onto the triangle plane and clamp to the closest feature
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (ap - ab * t).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (ap - ac * t).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (bp - (c - b) * t).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (ap - ab * v - ac * w).norm()
}

/// Distance from a point to the nearest face of the mesh.
pub fn distance_to_surface(mesh: &GuideMesh, p: Vec3) -> f64 {
    mesh.faces
        .iter()
        .map(|f| {
            point_triangle_distance(
                p,
                mesh.positions[f[0].position],
                mesh.positions[f[1].position],
                mesh.positions[f[2].position],
            )
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUAD_OBJ: &str = "\
# unit quad
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0 0
vt 1 0
vt 1 1
vt 0 1
f 1/1 2/2 3/3
f 1/1 3/3 4/4
";

    #[test]
    fn parse_unit_quad() {
        let mesh = parse_obj(QUAD_OBJ).unwrap();
        assert_eq!(mesh.positions.len(), 4);
        assert_eq!(mesh.uvs.len(), 4);
        assert_eq!(mesh.faces.len(), 2);
        assert_eq!(mesh.faces[1][2], Corner { position: 3, uv: 3 });
    }

    #[test]
    fn parse_tolerates_normals_and_comments() {
        let text = QUAD_OBJ.replace("f 1/1 2/2 3/3", "f 1/1/9 2/2/9 3/3/9 # tri");
        let extended = format!("vn 0 0 1\no quad\ns off\n{extended}", extended = text);
        let mesh = parse_obj(&extended).unwrap();
        assert_eq!(mesh.faces.len(), 2);
    }

    #[test]
    fn zero_face_index_names_line() {
        let bad = QUAD_OBJ.replace("f 1/1 2/2 3/3", "f 0/1 2/2 3/3");
        match parse_obj(&bad) {
            Err(MeshError::IndexOutOfRange { line, .. }) => assert_eq!(line, 10),
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn missing_vt_records_is_nouv() {
        let text = "\
v 0 0 0
v 1 0 0
v 0 1 0
f 1 2 3
";
        assert!(matches!(parse_obj(text), Err(MeshError::NoUv)));
    }

    #[test]
    fn bad_number_reports_line() {
        let bad = QUAD_OBJ.replace("v 1 0 0", "v 1 zero 0");
        match parse_obj(&bad) {
            Err(MeshError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn quad_anchors_g2() {
        let mesh = unit_quad();
        let anchors = anchor_primitives(&mesh, 2).unwrap();
        assert_eq!(anchors.len(), 4);
        assert!(anchors.covered.iter().all(|&c| c));
        // cell (0,0) center is UV (0.25, 0.25) -> surface point (0.25, 0.25, 0)
        assert!((anchors.t_hat[0] - Vec3::new(0.25, 0.25, 0.0)).norm() < 1e-12);
        // index k = j*g + i: cell (i=1, j=0) -> k=1 at (0.75, 0.25)
        assert!((anchors.t_hat[1] - Vec3::new(0.75, 0.25, 0.0)).norm() < 1e-12);
        for r in &anchors.r_hat {
            let normal_axis = r.rotate(Vec3::new(0.0, 0.0, 1.0));
            assert!((normal_axis - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-9);
        }
        // shared scale: bbox diagonal sqrt(2), g=2 -> sqrt(2)/6 per axis
        assert!((anchors.s_hat.x - 2.0_f64.sqrt() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn g1_single_anchor_at_uv_center() {
        let mesh = unit_quad();
        let anchors = anchor_primitives(&mesh, 1).unwrap();
        assert_eq!(anchors.len(), 1);
        assert!((anchors.t_hat[0] - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn g32_gives_1024_anchors() {
        let mesh = unit_quad();
        let anchors = anchor_primitives(&mesh, 32).unwrap();
        assert_eq!(anchors.len(), 1024);
    }

    #[test]
    fn anchors_deterministic() {
        let mesh = uv_sphere(1.0, 8, 12);
        let a = anchor_primitives(&mesh, 8).unwrap();
        let b = anchor_primitives(&mesh, 8).unwrap();
        for k in 0..a.len() {
            assert_eq!(a.t_hat[k].to_array(), b.t_hat[k].to_array());
            assert_eq!(a.r_hat[k].w.to_bits(), b.r_hat[k].w.to_bits());
        }
    }

    #[test]
    fn covered_anchors_lie_on_surface() {
        let mesh = uv_sphere(0.8, 10, 16);
        let anchors = anchor_primitives(&mesh, 8).unwrap();
        let mut n_covered = 0;
        for k in 0..anchors.len() {
            if anchors.covered[k] {
                n_covered += 1;
                assert!(
                    distance_to_surface(&mesh, anchors.t_hat[k]) < 1e-9,
                    "anchor {k} off surface"
                );
            }
        }
        assert!(n_covered > 0);
    }

    #[test]
    fn sphere_polar_cells_inherit() {
        // rings at v in (0,1): with a fine anchor grid the top/bottom UV rows
        // fall outside every triangle and must inherit
        let mesh = uv_sphere(1.0, 4, 8);
        let anchors = anchor_primitives(&mesh, 16).unwrap();
        assert!(anchors.covered.iter().any(|&c| !c), "expected uncovered cells");
        assert!(anchors.covered.iter().any(|&c| c));
        for t in &anchors.t_hat {
            assert!(t.is_finite());
        }
    }

    #[test]
    fn frames_are_proper_rotations() {
        let mesh = uv_sphere(1.0, 6, 9);
        let anchors = anchor_primitives(&mesh, 6).unwrap();
        for r in &anchors.r_hat {
            let m = r.to_matrix();
            assert!((m.det() - 1.0).abs() < 1e-9);
            let should_be_id = m.mul_mat(&m.transpose());
            for i in 0..3 {
                for j in 0..3 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((should_be_id.rows[i][j] - target).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sphere_frame_normal_is_radial() {
        let mesh = uv_sphere(1.0, 24, 32);
        let anchors = anchor_primitives(&mesh, 6).unwrap();
        for k in 0..anchors.len() {
            if !anchors.covered[k] {
                continue;
            }
            let normal = anchors.r_hat[k].rotate(Vec3::new(0.0, 0.0, 1.0));
            let radial = anchors.t_hat[k].normalized();
            // coarse tessellation: face normal vs true radial within ~15 deg
            assert!(normal.dot(radial).abs() > 0.96, "cell {k}");
        }
    }

    #[test]
    fn degenerate_uv_rejected() {
        let mut mesh = unit_quad();
        mesh.uvs[1] = (0.0, 0.0); // collapse an edge in UV space
        assert!(matches!(
            anchor_primitives(&mesh, 2),
            Err(MeshError::DegenerateUv(..))
        ));
    }

    #[test]
    fn quad_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.obj");
        std::fs::write(&path, QUAD_OBJ).unwrap();
        let mesh = load_mesh(&path).unwrap();
        assert_eq!(mesh.faces.len(), 2);
    }
}
