//! Paired layer surfaces and the `PLISURF 1` text format.
//!
//! A [`SurfacePair`] holds an inner and an outer triangulated surface with
//! identical vertex count and shared triangulation, plus per-vertex flat-map
//! coordinates `(u, v)` in the unit square and a ground-truth band label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Inner/outer surface pair with shared topology and per-vertex metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePair {
    /// Inner-surface vertex positions in voxel coordinates `(x, section, z)`.
    pub inner: Vec<[f64; 3]>,
    /// Outer-surface vertex positions, same ordering as `inner`.
    pub outer: Vec<[f64; 3]>,
    /// Flat-map coordinates per vertex, each component in `[0, 1]`.
    pub uv: Vec<[f64; 2]>,
    /// Ground-truth band label per vertex.
    pub labels: Vec<u8>,
    /// Shared triangulation, indices into the vertex arrays.
    pub faces: Vec<[usize; 3]>,
}

impl SurfacePair {
    /// Number of vertices per surface.
    #[must_use]
    pub fn n_vertices(&self) -> usize {
        self.inner.len()
    }

    /// Check all structural invariants of the pair.
    pub fn validate(&self) -> Result<()> {
        let n = self.inner.len();
        if self.outer.len() != n || self.uv.len() != n || self.labels.len() != n {
            return Err(Error::invalid(format!(
                "surface arrays disagree: inner {n}, outer {}, uv {}, labels {}",
                self.outer.len(),
                self.uv.len(),
                self.labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("surface pair has no vertices"));
        }
        for (i, uv) in self.uv.iter().enumerate() {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(Error::invalid(format!(
                    "vertex {i} has flat-map coordinates outside the unit square: ({}, {})",
                    uv[0], uv[1]
                )));
            }
        }
        for (f, face) in self.faces.iter().enumerate() {
            for &idx in face {
                if idx >= n {
                    return Err(Error::invalid(format!(
                        "face {f} references vertex {idx} of {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Vertex adjacency from shared triangle edges, sorted and deduplicated.
    #[must_use]
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_vertices()];
        for face in &self.faces {
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                adj[face[a]].push(face[b]);
                adj[face[b]].push(face[a]);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Serialize to the `PLISURF 1` text layout.
    #[must_use]
    pub fn to_plisurf(&self) -> String {
        let mut out = String::new();
        out.push_str("PLISURF 1\n");
        let _ = writeln!(out, "{} {}", self.n_vertices(), self.faces.len());
        for block in [&self.inner, &self.outer] {
            for (i, p) in block.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "v {:.6} {:.6} {:.6} {:.6} {:.6} {}",
                    p[0], p[1], p[2], self.uv[i][0], self.uv[i][1], self.labels[i]
                );
            }
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0], f[1], f[2]);
        }
        out
    }

    /// Write the pair to `path` as `PLISURF 1` text.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_plisurf())?;
        Ok(())
    }

    /// Parse a `PLISURF 1` document.
    pub fn from_plisurf(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("PLISURF 1") => {}
            other => {
                return Err(Error::format(format!(
                    "not a PLISURF 1 document (first line {other:?})"
                )))
            }
        }
        let counts = lines
            .next()
            .ok_or_else(|| Error::format("missing count line"))?;
        let mut it = counts.split_whitespace();
        let n_vertices: usize = parse_token(it.next(), "vertex count")?;
        let n_faces: usize = parse_token(it.next(), "face count")?;
        if n_vertices == 0 {
            return Err(Error::format("vertex count is zero"));
        }

        let mut inner = Vec::with_capacity(n_vertices);
        let mut outer = Vec::with_capacity(n_vertices);
        let mut uv = Vec::with_capacity(n_vertices);
        let mut labels = Vec::with_capacity(n_vertices);
        for block in 0..2 {
            for i in 0..n_vertices {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::format(format!("vertex line {i} missing")))?;
                let mut t = line.split_whitespace();
                if t.next() != Some("v") {
                    return Err(Error::format(format!("expected vertex line, got {line:?}")));
                }
                let x: f64 = parse_token(t.next(), "x")?;
                let y: f64 = parse_token(t.next(), "y")?;
                let z: f64 = parse_token(t.next(), "z")?;
                let u: f64 = parse_token(t.next(), "u")?;
                let v: f64 = parse_token(t.next(), "v")?;
                let label: u8 = parse_token(t.next(), "label")?;
                if t.next().is_some() {
                    return Err(Error::format(format!("trailing tokens on {line:?}")));
                }
                if block == 0 {
                    inner.push([x, y, z]);
                    uv.push([u, v]);
                    labels.push(label);
                } else {
                    outer.push([x, y, z]);
                    if uv[i] != [u, v] || labels[i] != label {
                        return Err(Error::format(format!(
                            "vertex {i}: outer block metadata disagrees with inner block"
                        )));
                    }
                }
            }
        }
        let mut faces = Vec::with_capacity(n_faces);
        for i in 0..n_faces {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(format!("face line {i} missing")))?;
            let mut t = line.split_whitespace();
            if t.next() != Some("f") {
                return Err(Error::format(format!("expected face line, got {line:?}")));
            }
            let a: usize = parse_token(t.next(), "face index")?;
            let b: usize = parse_token(t.next(), "face index")?;
            let c: usize = parse_token(t.next(), "face index")?;
            faces.push([a, b, c]);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::format("trailing content after face block"));
        }
        let pair = SurfacePair {
            inner,
            outer,
            uv,
            labels,
            faces,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Read a `PLISURF 1` file.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_plisurf(&text)
    }
}

fn parse_token<T: std::str::FromStr>(token: Option<&str>, what: &str) -> Result<T> {
    token
        .ok_or_else(|| Error::format(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::format(format!("unparsable {what}")))
}

/// Triangulate a regular `n_u x n_v` vertex grid; vertex index is
/// `iu * n_v + iv`.
#[must_use]
pub fn grid_faces(n_u: usize, n_v: usize) -> Vec<[usize; 3]> {
    let mut faces = Vec::with_capacity(2 * n_u.saturating_sub(1) * n_v.saturating_sub(1));
    for iu in 0..n_u.saturating_sub(1) {
        for iv in 0..n_v.saturating_sub(1) {
            let a = iu * n_v + iv;
            let b = (iu + 1) * n_v + iv;
            let c = iu * n_v + iv + 1;
            let d = (iu + 1) * n_v + iv + 1;
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    faces
}

/// Area-weighted vertex normals of one surface (normalized; zero for
/// vertices without any non-degenerate incident face).
#[must_use]
pub fn vertex_normals(positions: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<[f64; 3]> {
    let mut normals = vec![[0.0f64; 3]; positions.len()];
    for face in faces {
        let p0 = positions[face[0]];
        let p1 = positions[face[1]];
        let p2 = positions[face[2]];
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let n = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for &idx in face {
            for k in 0..3 {
                normals[idx][k] += n[k];
            }
        }
    }
    for n in &mut normals {
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len > 1e-12 {
            for k in 0..3 {
                n[k] /= len;
            }
        } else {
            *n = [0.0; 3];
        }
    }
    normals
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_vertex_pair() -> SurfacePair {
        SurfacePair {
            inner: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            outer: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
            uv: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            labels: vec![0, 1, 2],
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn plisurf_roundtrip() {
        let pair = two_vertex_pair();
        let text = pair.to_plisurf();
        assert!(text.starts_with("PLISURF 1\n3 1\n"));
        let back = SurfacePair::from_plisurf(&text).unwrap();
        assert_eq!(back, pair);
    }

    #[test]
    fn header_is_checked() {
        let err = SurfacePair::from_plisurf("PLISURF 2\n1 0\n").unwrap_err();
        assert!(err.to_string().contains("PLISURF"), "{err}");
    }

    #[test]
    fn face_out_of_range_is_rejected() {
        let mut pair = two_vertex_pair();
        pair.faces[0] = [0, 1, 7];
        assert!(pair.validate().is_err());
        assert!(SurfacePair::from_plisurf(&pair.to_plisurf()).is_err());
    }

    #[test]
    fn metadata_mismatch_between_blocks_is_rejected() {
        let pair = two_vertex_pair();
        let text = pair.to_plisurf();
        // Corrupt the label of the first outer-block vertex.
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[5] = lines[5].replace(" 0", " 3");
        let err = SurfacePair::from_plisurf(&lines.join("\n")).unwrap_err();
        assert!(err.to_string().contains("disagrees"), "{err}");
    }

    #[test]
    fn uv_outside_unit_square_is_rejected() {
        let mut pair = two_vertex_pair();
        pair.uv[1] = [1.5, 0.0];
        assert!(pair.validate().is_err());
    }

    #[test]
    fn grid_faces_tile_the_grid() {
        let faces = grid_faces(3, 4);
        assert_eq!(faces.len(), 2 * 2 * 3);
        for f in &faces {
            assert!(f.iter().all(|&i| i < 12));
        }
    }

    #[test]
    fn adjacency_is_symmetric_and_deduplicated() {
        let pair = SurfacePair {
            inner: (0..12).map(|i| [f64::from(i), 0.0, 0.0]).collect(),
            outer: (0..12).map(|i| [f64::from(i), 0.0, 1.0]).collect(),
            uv: vec![[0.5, 0.5]; 12],
            labels: vec![0; 12],
            faces: grid_faces(3, 4),
        };
        let adj = pair.adjacency();
        for (i, list) in adj.iter().enumerate() {
            for &j in list {
                assert!(adj[j].contains(&i));
                assert_ne!(i, j);
            }
            let mut sorted = list.clone();
            sorted.dedup();
            assert_eq!(&sorted, list);
        }
    }

    #[test]
    fn flat_grid_normals_point_along_z() {
        let mut positions = Vec::new();
        for iu in 0..3 {
            for iv in 0..4 {
                positions.push([f64::from(iu), f64::from(iv), 0.0]);
            }
        }
        let normals = vertex_normals(&positions, &grid_faces(3, 4));
        for n in normals {
            assert_relative_eq!(n[2].abs(), 1.0, epsilon = 1e-12);
        }
    }
}
