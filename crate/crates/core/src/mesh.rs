//! STL input and inside/outside voxelization of closed triangle meshes.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{Dims, LabelVolume, MaskVolume, VoxelError};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("STL format error: {0}")]
    Format(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

pub type Triangle = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub triangles: Vec<Triangle>,
}

impl TriangleMesh {
    pub fn new(triangles: Vec<Triangle>) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::InvalidMesh("no triangles".into()));
        }
        if triangles.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(MeshError::InvalidMesh("non-finite vertex".into()));
        }
        Ok(Self { triangles })
    }

    /// `(min, max)` corners.
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in self.triangles.iter().flatten() {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }
}

pub fn read_stl(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    parse_stl(&std::fs::read(path)?)
}

/// Parses binary or ASCII STL. A buffer whose length matches the binary
/// header count is binary; otherwise it must be ASCII.
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    if bytes.len() >= 84 {
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if count.checked_mul(50).and_then(|n| n.checked_add(84)) == Some(bytes.len()) {
            return parse_binary(bytes, count);
        }
    }
    let looks_ascii = std::str::from_utf8(bytes)
        .map(|s| s.trim_start().starts_with("solid"))
        .unwrap_or(false);
    if looks_ascii {
        return parse_ascii(std::str::from_utf8(bytes).unwrap());
    }
    if bytes.len() >= 84 {
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap());
        let records = (bytes.len() - 84) / 50;
        return Err(MeshError::Format(format!(
            "header declares {count} triangles but {records} records are present"
        )));
    }
    Err(MeshError::Format("file too short for binary STL and not ASCII".into()))
}

fn parse_binary(bytes: &[u8], count: usize) -> Result<TriangleMesh, MeshError> {
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    let triangles = (0..count)
        .map(|t| {
            let base = 84 + 50 * t + 12; // skip the normal
            std::array::from_fn(|v| std::array::from_fn(|a| f(base + 12 * v + 4 * a)))
        })
        .collect();
    TriangleMesh::new(triangles).map_err(|e| MeshError::Format(e.to_string()))
}

fn parse_ascii(text: &str) -> Result<TriangleMesh, MeshError> {
    let bad = |line: usize, m: &str| MeshError::Format(format!("line {line}: {m}"));
    let mut triangles = Vec::new();
    let mut current: Option<Vec<[f64; 3]>> = None;
    let mut ended = false;
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let mut tok = line.split_whitespace();
        let Some(head) = tok.next() else { continue };
        match head {
            "solid" if triangles.is_empty() && current.is_none() => {}
            "facet" => {
                if current.is_some() {
                    return Err(bad(n, "nested facet"));
                }
                current = Some(Vec::with_capacity(3));
            }
            "outer" | "endloop" => {
                if current.is_none() {
                    return Err(bad(n, "loop outside facet"));
                }
            }
            "vertex" => {
                let verts = current.as_mut().ok_or_else(|| bad(n, "vertex outside facet"))?;
                let coords: Vec<f64> = tok
                    .map(|t| t.parse::<f64>().map_err(|_| bad(n, "bad number")))
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(bad(n, "vertex needs three finite coordinates"));
                }
                verts.push([coords[0], coords[1], coords[2]]);
            }
            "endfacet" => {
                let verts = current.take().ok_or_else(|| bad(n, "endfacet without facet"))?;
                if verts.len() != 3 {
                    return Err(bad(n, "facet must have exactly three vertices"));
                }
                triangles.push([verts[0], verts[1], verts[2]]);
            }
            "endsolid" => {
                ended = true;
                break;
            }
            other => return Err(bad(n, &format!("unexpected token {other:?}"))),
        }
    }
    if current.is_some() || !ended {
        return Err(MeshError::Format("unterminated solid".into()));
    }
    TriangleMesh::new(triangles).map_err(|e| MeshError::Format(e.to_string()))
}

/// Maps mesh coordinates into voxel coordinates: `p * scale + translate`.
/// Voxel `(i, j, k)` has its centre at `(i + 0.5, j + 0.5, k + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub scale: [f64; 3],
    pub translate: [f64; 3],
}

impl Default for Transform {
    fn default() -> Self {
        Self {
            scale: [1.0; 3],
            translate: [0.0; 3],
        }
    }
}

impl Transform {
    pub fn uniform(scale: f64, translate: [f64; 3]) -> Self {
        Self {
            scale: [scale; 3],
            translate,
        }
    }

    /// Largest uniform scaling that fits the mesh bounding box in `dims`,
    /// anchored at the origin corner.
    pub fn fit(mesh: &TriangleMesh, dims: Dims) -> Self {
        let (lo, hi) = mesh.bbox();
        let d = dims.as_array();
        let s = (0..3)
            .filter(|&a| hi[a] > lo[a])
            .map(|a| d[a] as f64 / (hi[a] - lo[a]))
            .fold(f64::INFINITY, f64::min);
        let s = if s.is_finite() { s } else { 1.0 };
        Self::uniform(s, [0, 1, 2].map(|a| -lo[a] * s))
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| p[a] * self.scale[a] + self.translate[a])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    pub mask: MaskVolume,
    /// Voxels whose three ray parities did not all agree.
    pub inconsistent: usize,
    /// Set when `inconsistent` exceeds 0.1% of the voxels.
    pub non_watertight: bool,
}

// tiny irrational offsets so rays through voxel centres miss mesh edges
const JITTER: [f64; 3] = [1.4142135623730951e-7, 1.7320508075688772e-7, 2.2360679774997896e-7];

/// Signed crossing position along `axis` of the line through `(u, v)` in
/// the two remaining axes, if it pierces the triangle.
fn crossing(tri: &Triangle, axis: usize, u: f64, v: f64) -> Option<f64> {
    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
    let p = tri.map(|q| (q[ua] - u, q[va] - v));
    let edge = |a: (f64, f64), b: (f64, f64)| a.0 * b.1 - a.1 * b.0;
    let w0 = edge(p[1], p[2]);
    let w1 = edge(p[2], p[0]);
    let w2 = edge(p[0], p[1]);
    let pos = w0 > 0.0 && w1 > 0.0 && w2 > 0.0;
    let neg = w0 < 0.0 && w1 < 0.0 && w2 < 0.0;
    if !(pos || neg) {
        return None;
    }
    let sum = w0 + w1 + w2;
    Some((w0 * tri[0][axis] + w1 * tri[1][axis] + w2 * tri[2][axis]) / sum)
}

/// Inside bits from parity rays along one axis, one entry per voxel.
fn axis_parity(tris: &[Triangle], dims: Dims, axis: usize) -> Vec<bool> {
    let d = dims.as_array();
    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
    let (nu, nv, nw) = (d[ua], d[va], d[axis]);
    // bucket triangles by the rows their projected bounding box touches
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nu * nv];
    for (t, tri) in tris.iter().enumerate() {
        let lo_u = tri.iter().map(|p| p[ua]).fold(f64::INFINITY, f64::min);
        let hi_u = tri.iter().map(|p| p[ua]).fold(f64::NEG_INFINITY, f64::max);
        let lo_v = tri.iter().map(|p| p[va]).fold(f64::INFINITY, f64::min);
        let hi_v = tri.iter().map(|p| p[va]).fold(f64::NEG_INFINITY, f64::max);
        let range = |lo: f64, hi: f64, n: usize| {
            let a = (lo - 0.5).floor().max(0.0) as usize;
            let b = ((hi - 0.5).ceil() + 1.0).clamp(0.0, n as f64) as usize;
            a..b.max(a)
        };
        for iu in range(lo_u, hi_u, nu) {
            for iv in range(lo_v, hi_v, nv) {
                buckets[iu * nv + iv].push(t as u32);
            }
        }
    }
    let rows: Vec<Vec<bool>> = (0..nu * nv)
        .into_par_iter()
        .map(|row| {
            let (iu, iv) = (row / nv, row % nv);
            let u = iu as f64 + 0.5 + JITTER[ua];
            let v = iv as f64 + 0.5 + JITTER[va];
            let mut hits: Vec<f64> = buckets[row]
                .iter()
                .filter_map(|&t| crossing(&tris[t as usize], axis, u, v))
                .collect();
            hits.sort_by(f64::total_cmp);
            let mut out = vec![false; nw];
            let mut k = 0;
            for (w, o) in out.iter_mut().enumerate() {
                let c = w as f64 + 0.5 + JITTER[axis];
                while k < hits.len() && hits[k] < c {
                    k += 1;
                }
                *o = k % 2 == 1;
            }
            out
        })
        .collect();
    let mut bits = vec![false; dims.len()];
    for (row, r) in rows.into_iter().enumerate() {
        let (iu, iv) = (row / nv, row % nv);
        for (w, b) in r.into_iter().enumerate() {
            let mut c = [0usize; 3];
            c[ua] = iu;
            c[va] = iv;
            c[axis] = w;
            bits[dims.index(c[0], c[1], c[2])] = b;
        }
    }
    bits
}

/// Inside test of every voxel centre by majority vote of parity rays along
/// x, y and z.
pub fn voxelize(mesh: &TriangleMesh, dims: Dims, transform: &Transform) -> Voxelization {
    let tris: Vec<Triangle> = mesh.triangles.iter().map(|t| t.map(|p| transform.apply(p))).collect();
    let votes: Vec<Vec<bool>> = (0..3).map(|axis| axis_parity(&tris, dims, axis)).collect();
    let mut inconsistent = 0;
    let data = (0..dims.len())
        .map(|i| {
            let n = votes.iter().filter(|v| v[i]).count();
            if n == 1 || n == 2 {
                inconsistent += 1;
            }
            u8::from(n >= 2)
        })
        .collect();
    Voxelization {
        mask: MaskVolume::from_vec(dims, data).expect("dims match"),
        inconsistent,
        non_watertight: inconsistent as f64 > 1e-3 * dims.len() as f64,
    }
}

/// Sets voxels outside the mask to `outside_label`; inside voxels are untouched.
pub fn apply_mask(labels: &LabelVolume, mask: &MaskVolume, outside_label: u32) -> Result<LabelVolume, MeshError> {
    if labels.dims() != mask.dims() {
        return Err(VoxelError::ShapeMismatch {
            expected: labels.dims().as_array(),
            actual: mask.dims().as_array(),
        }
        .into());
    }
    let mut out = labels.clone();
    for (l, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        if m == 0 {
            *l = outside_label;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The 12 facets of [0,1]^3, outward winding.
    fn cube_triangles() -> Vec<Triangle> {
        let v = |x: u8, y: u8, z: u8| [x as f64, y as f64, z as f64];
        let quad = |a, b, c, d| [[a, b, c], [a, c, d]];
        [
            quad(v(0, 0, 0), v(0, 1, 0), v(1, 1, 0), v(1, 0, 0)),
            quad(v(0, 0, 1), v(1, 0, 1), v(1, 1, 1), v(0, 1, 1)),
            quad(v(0, 0, 0), v(1, 0, 0), v(1, 0, 1), v(0, 0, 1)),
            quad(v(0, 1, 0), v(0, 1, 1), v(1, 1, 1), v(1, 1, 0)),
            quad(v(0, 0, 0), v(0, 0, 1), v(0, 1, 1), v(0, 1, 0)),
            quad(v(1, 0, 0), v(1, 1, 0), v(1, 1, 1), v(1, 0, 1)),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    fn binary_stl(tris: &[Triangle], declared: u32) -> Vec<u8> {
        let mut b = vec![0u8; 80];
        b.extend_from_slice(&declared.to_le_bytes());
        for t in tris {
            b.extend_from_slice(&[0u8; 12]);
            for p in t {
                for c in p {
                    b.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
            b.extend_from_slice(&[0, 0]);
        }
        b
    }

    fn ascii_stl(tris: &[Triangle]) -> String {
        let mut s = String::from("solid cube\n");
        for t in tris {
            s.push_str("  facet normal 0 0 0\n    outer loop\n");
            for p in t {
                s.push_str(&format!("      vertex {} {} {}\n", p[0], p[1], p[2]));
            }
            s.push_str("    endloop\n  endfacet\n");
        }
        s.push_str("endsolid cube\n");
        s
    }

    #[test]
    fn binary_and_ascii_cube_agree() {
        let tris = cube_triangles();
        let b = parse_stl(&binary_stl(&tris, 12)).unwrap();
        let a = parse_stl(ascii_stl(&tris).as_bytes()).unwrap();
        assert_eq!(b.triangles.len(), 12);
        assert_eq!(b.bbox(), ([0.0; 3], [1.0; 3]));
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_stl_is_rejected() {
        let tris = cube_triangles();
        let mut short = binary_stl(&tris, 100);
        short.truncate(84 + 50 * 10);
        assert!(matches!(parse_stl(&short), Err(MeshError::Format(_))));
        assert!(matches!(parse_stl(b"solid x\nfacet normal 0 0 0\nvertex 1 2\n"), Err(MeshError::Format(_))));
        assert!(matches!(parse_stl(b"solid x\nendsolid x\n"), Err(MeshError::Format(_))));
        assert!(matches!(parse_stl(b"nonsense"), Err(MeshError::Format(_))));
    }

    #[test]
    fn unit_cube_fills_grid() {
        let mesh = TriangleMesh::new(cube_triangles()).unwrap();
        let dims = Dims::cube(10).unwrap();
        let v = voxelize(&mesh, dims, &Transform::fit(&mesh, dims));
        assert_eq!(v.mask.data().iter().filter(|&&m| m == 1).count(), 1000);
        assert_eq!(v.inconsistent, 0);
        // half-size cube: analytic count of centres in [2.5, 7.5)^3
        let v = voxelize(&mesh, dims, &Transform::uniform(5.0, [2.5; 3]));
        let expect = (0..10).filter(|&i| (2.5..7.5).contains(&(i as f64 + 0.5))).count().pow(3);
        assert_eq!(v.mask.data().iter().filter(|&&m| m == 1).count(), expect);
    }

    #[test]
    fn order_and_winding_do_not_matter() {
        let mut tris = cube_triangles();
        let mesh = TriangleMesh::new(tris.clone()).unwrap();
        let dims = Dims::new(7, 9, 5).unwrap();
        let tf = Transform { scale: [5.0, 6.3, 3.1], translate: [0.7, 1.1, 0.9] };
        let base = voxelize(&mesh, dims, &tf);
        tris.reverse();
        for t in tris.iter_mut().step_by(2) {
            t.swap(1, 2);
        }
        let flipped = voxelize(&TriangleMesh::new(tris).unwrap(), dims, &tf);
        assert_eq!(base, flipped);
    }

    #[test]
    fn open_mesh_warns() {
        let mesh = TriangleMesh::new(vec![[[0.0, 0.0, 0.0], [10.0, 0.0, 5.0], [0.0, 10.0, 5.0]]]).unwrap();
        let v = voxelize(&mesh, Dims::cube(10).unwrap(), &Transform::default());
        assert!(v.non_watertight);
    }

    #[test]
    fn mask_application() {
        let d = Dims::new(4, 2, 1).unwrap();
        let labels = LabelVolume::from_vec(d, (0..8).collect()).unwrap();
        assert_eq!(apply_mask(&labels, &MaskVolume::filled(d, 1), 0).unwrap(), labels);
        let none = apply_mask(&labels, &MaskVolume::filled(d, 0), 9).unwrap();
        assert!(none.data().iter().all(|&l| l == 9));
        let half = MaskVolume::from_vec(d, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        let out = apply_mask(&labels, &half, 99).unwrap();
        assert_eq!(out.data().iter().zip(labels.data()).filter(|(a, b)| a != b).count(), 4);
        assert!(apply_mask(&labels, &MaskVolume::filled(Dims::cube(2).unwrap(), 1), 0).is_err());
    }
}
