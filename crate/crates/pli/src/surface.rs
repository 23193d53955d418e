//! Surface-based feature sampling: depth interpolation between the inner and
//! outer surface, trilinear lookup in a feature volume, depth-major
//! concatenation, graph smoothing over the mesh, and rasterization into
//! unfolded (u, v) space.
//!
//! Vertices that fall outside the feature grid at any depth are flagged
//! missing and carried as such downstream rather than erroring.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::featmap::FeatureVolume;
use crate::mesh::{vertex_normals, SurfacePair};

/// Vertex positions at `depths` evenly spaced levels from the inner surface
/// (depth 0) to the outer surface (depth `depths−1`), inclusive.
pub fn interpolate_depths(pair: &SurfacePair, depths: usize) -> Result<Vec<Vec<[f64; 3]>>> {
    pair.validate()?;
    if depths < 2 {
        return Err(Error::invalid(
            "depth interpolation needs at least the two bounding surfaces",
        ));
    }
    let n = pair.n_vertices();
    let mut levels = Vec::with_capacity(depths);
    for d in 0..depths {
        let t = d as f64 / (depths - 1) as f64;
        let mut level = Vec::with_capacity(n);
        for v in 0..n {
            let a = pair.inner[v];
            let b = pair.outer[v];
            level.push([
                a[0] + t * (b[0] - a[0]),
                a[1] + t * (b[1] - a[1]),
                a[2] + t * (b[2] - a[2]),
            ]);
        }
        levels.push(level);
    }
    Ok(levels)
}

/// Trilinear samples of the feature volume at voxel-space vertices
/// `(x, section, z)`. The volume's leading grid axis runs along z (map
/// rows) and its trailing axis along x (map columns), matching the raster
/// layout feature maps are computed on. Returns `[n_vertices, C]` values and
/// a per-vertex missing flag for vertices outside the window grid; missing
/// rows are zero.
#[must_use]
pub fn sample_at_vertices(vol: &FeatureVolume, vertices: &[[f64; 3]]) -> (Array2<f32>, Vec<bool>) {
    let (gh, ny, gw, c) = vol.values.dim();
    let mut out = Array2::<f32>::zeros((vertices.len(), c));
    let mut missing = vec![false; vertices.len()];
    for (row, v) in vertices.iter().enumerate() {
        let g_row = vol.grid_coord(v[2]);
        let g_sec = v[1];
        let g_col = vol.grid_coord(v[0]);
        let inside = g_row >= 0.0
            && g_row <= (gh - 1) as f64
            && g_sec >= 0.0
            && g_sec <= (ny - 1) as f64
            && g_col >= 0.0
            && g_col <= (gw - 1) as f64
            && g_row.is_finite()
            && g_sec.is_finite()
            && g_col.is_finite();
        if !inside {
            missing[row] = true;
            continue;
        }
        let x0 = g_row.floor() as usize;
        let y0 = g_sec.floor() as usize;
        let z0 = g_col.floor() as usize;
        let x1 = (x0 + 1).min(gh - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(gw - 1);
        let fx = g_row - x0 as f64;
        let fy = g_sec - y0 as f64;
        let fz = g_col - z0 as f64;
        for ch in 0..c {
            let mut acc = 0.0f64;
            for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                        acc += wx * wy * wz * f64::from(vol.values[[xi, yi, zi, ch]]);
                    }
                }
            }
            out[[row, ch]] = acc as f32;
        }
    }
    (out, missing)
}

/// Depth-major concatenation of per-depth vertex samples: row `v` becomes
/// `[depth0 | depth1 | ...]`. A vertex missing at any depth is missing in the
/// result, and its row is zeroed.
pub fn concat_depths(per_depth: &[(Array2<f32>, Vec<bool>)]) -> Result<(Array2<f32>, Vec<bool>)> {
    let Some((first, _)) = per_depth.first() else {
        return Err(Error::invalid("no depth levels to concatenate"));
    };
    let (n, c) = first.dim();
    for (m, flags) in per_depth {
        if m.dim() != (n, c) || flags.len() != n {
            return Err(Error::invalid(
                "depth levels disagree on vertex count or feature width",
            ));
        }
    }
    let d = per_depth.len();
    let mut out = Array2::<f32>::zeros((n, d * c));
    let mut missing = vec![false; n];
    for v in 0..n {
        for (di, (m, flags)) in per_depth.iter().enumerate() {
            if flags[v] {
                missing[v] = true;
            } else {
                for ch in 0..c {
                    out[[v, di * c + ch]] = m[[v, ch]];
                }
            }
        }
        if missing[v] {
            out.row_mut(v).fill(0.0);
        }
    }
    Ok((out, missing))
}

/// Iterative mesh smoothing: each present row becomes the mean over its
/// present graph neighborhood. Iterations are synchronous, so the result does
/// not depend on vertex order; missing rows neither contribute nor change.
#[must_use]
pub fn graph_smooth(
    features: &Array2<f32>,
    missing: &[bool],
    adjacency: &[Vec<usize>],
    iters: usize,
    include_self: bool,
) -> Array2<f32> {
    let (n, c) = features.dim();
    assert_eq!(missing.len(), n, "one missing flag per row");
    assert_eq!(adjacency.len(), n, "one adjacency list per row");
    let mut cur = features.clone();
    let mut next = features.clone();
    for _ in 0..iters {
        for v in 0..n {
            if missing[v] {
                continue;
            }
            let mut count = 0usize;
            let mut acc = vec![0.0f64; c];
            if include_self {
                count += 1;
                for ch in 0..c {
                    acc[ch] += f64::from(cur[[v, ch]]);
                }
            }
            for &nb in &adjacency[v] {
                if !missing[nb] {
                    count += 1;
                    for ch in 0..c {
                        acc[ch] += f64::from(cur[[nb, ch]]);
                    }
                }
            }
            if count == 0 {
                continue;
            }
            for ch in 0..c {
                next[[v, ch]] = (acc[ch] / count as f64) as f32;
            }
        }
        std::mem::swap(&mut cur, &mut next);
        next.assign(&cur);
    }
    cur
}

/// Cutting-angle confound per vertex: the angle, in degrees within [0, 90],
/// between the local mid-surface normal and the section axis, measured in
/// physical micrometer coordinates so anisotropic sampling is respected.
#[must_use]
pub fn cutting_angle_confound(
    pair: &SurfacePair,
    pixel_size_um: f64,
    section_thickness_um: f64,
) -> Vec<f64> {
    let n = pair.n_vertices();
    let mut mid = Vec::with_capacity(n);
    for v in 0..n {
        let a = pair.inner[v];
        let b = pair.outer[v];
        mid.push([
            0.5 * (a[0] + b[0]) * pixel_size_um,
            0.5 * (a[1] + b[1]) * section_thickness_um,
            0.5 * (a[2] + b[2]) * pixel_size_um,
        ]);
    }
    vertex_normals(&mid, &pair.faces)
        .iter()
        .map(|nrm| nrm[1].abs().clamp(0.0, 1.0).acos().to_degrees())
        .collect()
}

/// Winning vertex per unfolded (u, v) cell. Each vertex lands in the cell
/// containing its (u, v); among competitors the vertex closest to the cell
/// center wins. Cells no vertex lands in hold −1.
#[must_use]
pub fn rasterize_vertex_index(
    uv: &[[f64; 2]],
    width: usize,
    height: usize,
) -> ndarray::Array2<i64> {
    let mut winner = ndarray::Array2::<i64>::from_elem((height, width), -1);
    let mut best = vec![f64::INFINITY; width * height];
    for (i, p) in uv.iter().enumerate() {
        if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
            continue;
        }
        let cx = ((p[0] * width as f64) as usize).min(width - 1);
        let cy = ((p[1] * height as f64) as usize).min(height - 1);
        let center_u = (cx as f64 + 0.5) / width as f64;
        let center_v = (cy as f64 + 0.5) / height as f64;
        let d2 = (p[0] - center_u).powi(2) + (p[1] - center_v).powi(2);
        let cell = cy * width + cx;
        if d2 < best[cell] {
            best[cell] = d2;
            winner[[cy, cx]] = i as i64;
        }
    }
    winner
}

/// Nearest-vertex rasterization into unfolded (u, v) space, cell ownership as
/// in [`rasterize_vertex_index`]. Cells without a vertex show `background`;
/// missing vertices paint `missing_color`.
#[must_use]
pub fn rasterize_unfolded(
    uv: &[[f64; 2]],
    colors: &[[u8; 3]],
    missing: &[bool],
    width: usize,
    height: usize,
    background: [u8; 3],
    missing_color: [u8; 3],
) -> ndarray::Array3<u8> {
    assert_eq!(uv.len(), colors.len(), "one color per vertex");
    assert_eq!(uv.len(), missing.len(), "one missing flag per vertex");
    let winner = rasterize_vertex_index(uv, width, height);
    ndarray::Array3::<u8>::from_shape_fn((height, width, 3), |(cy, cx, ch)| {
        match usize::try_from(winner[[cy, cx]]) {
            Err(_) => background[ch],
            Ok(i) if missing[i] => missing_color[ch],
            Ok(i) => colors[i][ch],
        }
    })
}

/// Write the per-vertex metadata table: index, unfolded coordinates, label,
/// cutting-angle confound, and the missing flag, as CSV.
pub fn write_vertex_metadata(
    path: &Path,
    pair: &SurfacePair,
    confound: &[f64],
    missing: &[bool],
) -> Result<()> {
    let n = pair.n_vertices();
    if confound.len() != n || missing.len() != n {
        return Err(Error::invalid(
            "metadata columns disagree with the vertex count",
        ));
    }
    let mut text = String::from("index,u,v,label,confound_deg,missing\n");
    for i in 0..n {
        let _ = writeln!(
            text,
            "{i},{},{},{},{},{}",
            pair.uv[i][0],
            pair.uv[i][1],
            pair.labels[i],
            confound[i],
            u8::from(missing[i]),
        );
    }
    fs::write(path, text)?;
    Ok(())
}
