//! Sliding-window encoder inference: per-section feature maps on a regular
//! window grid, stacked into a feature volume over sections.
//!
//! Windows lie fully inside the section (no boundary padding) on a stride
//! derived from the window overlap; each grid cell holds the encoder's
//! pooled feature vector for its window. Inference never augments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, ArrayView3};

use crate::baseline::grid_extent;
use crate::error::{Error, Result};
use crate::ssl::{EncoderParams, Loc};
use crate::tensor_io::{read_tensor, write_tensor};

/// Stacked per-section feature maps, `[H', sections, W', C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub values: Array4<f32>,
    pub patch_px: usize,
    pub stride_px: usize,
    /// In-plane pixel size of the underlying raster, µm.
    pub pixel_size_um: f64,
}

impl FeatureVolume {
    #[must_use]
    pub fn n_channels(&self) -> usize {
        self.values.dim().3
    }

    /// Map a voxel coordinate to a fractional window-grid coordinate.
    /// Grid node `g` is centered at voxel `(patch−1)/2 + g·stride`.
    #[must_use]
    pub fn grid_coord(&self, voxel: f64) -> f64 {
        (voxel - (self.patch_px as f64 - 1.0) / 2.0) / self.stride_px as f64
    }
}

/// Stride for a window overlap fraction; errors unless the stride is a
/// positive whole number of pixels.
pub fn stride_for(patch_px: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid("window overlap must lie in [0, 1)"));
    }
    let stride = patch_px as f64 * (1.0 - overlap);
    let rounded = stride.round();
    if (stride - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::invalid(format!(
            "overlap {overlap} of a {patch_px} px window gives a non-integral stride"
        )));
    }
    Ok(rounded as usize)
}

/// Encode every window of one section's `[4, H, W]` maps; returns
/// `[H', W', C]` pooled feature vectors.
pub fn feature_maps(
    params: &EncoderParams,
    section_maps: &ArrayView3<'_, f32>,
    overlap: f64,
) -> Result<Array3<f32>> {
    let stride = stride_for(params.patch_px, overlap)?;
    let (_, h, w) = section_maps.dim();
    if params.patch_px > h || params.patch_px > w {
        return Err(Error::invalid(format!(
            "section {h}x{w} is smaller than one {} px window",
            params.patch_px
        )));
    }
    let gh = grid_extent(h, params.patch_px, stride);
    let gw = grid_extent(w, params.patch_px, stride);
    let half = params.patch_px / 2;
    let c = params.modality.n_channels();
    let mut windows = Array4::<f32>::zeros((gh * gw, c, params.crop_px, params.crop_px));
    for gy in 0..gh {
        for gx in 0..gw {
            let center = Loc {
                section: 0,
                row: gy * stride + half,
                col: gx * stride + half,
            };
            let input = params.inference_input(section_maps, center)?;
            windows
                .slice_mut(s![gy * gw + gx, .., .., ..])
                .assign(&input);
        }
    }
    let features = params.encode_batch(&windows)?;
    let cdim = params.feature_dim();
    let mut out = Array3::<f32>::zeros((gh, gw, cdim));
    for gy in 0..gh {
        for gx in 0..gw {
            out.slice_mut(s![gy, gx, ..])
                .assign(&features.row(gy * gw + gx));
        }
    }
    Ok(out)
}

/// Stack per-section `[H', W', C]` maps, keyed by section index, into a
/// feature volume. Indices must form the contiguous range `0..n`.
pub fn stack_volume(
    sections: &[(usize, Array3<f32>)],
    patch_px: usize,
    stride_px: usize,
    pixel_size_um: f64,
) -> Result<FeatureVolume> {
    if sections.is_empty() {
        return Err(Error::invalid("no sections to stack"));
    }
    let mut ordered: Vec<&(usize, Array3<f32>)> = sections.iter().collect();
    ordered.sort_by_key(|(idx, _)| *idx);
    let (gh, gw, c) = ordered[0].1.dim();
    for (pos, (idx, map)) in ordered.iter().enumerate() {
        if *idx != pos {
            return Err(Error::invalid(format!(
                "gap in section sequence: expected section {pos}, found {idx}"
            )));
        }
        if map.dim() != (gh, gw, c) {
            return Err(Error::invalid(format!(
                "section {idx} grid {:?} disagrees with {:?}",
                map.dim(),
                (gh, gw, c)
            )));
        }
    }
    let n = ordered.len();
    let mut values = Array4::<f32>::zeros((gh, n, gw, c));
    for (y, (_, map)) in ordered.iter().enumerate() {
        for gy in 0..gh {
            for gx in 0..gw {
                values
                    .slice_mut(s![gy, y, gx, ..])
                    .assign(&map.slice(s![gy, gx, ..]));
            }
        }
    }
    Ok(FeatureVolume {
        values,
        patch_px,
        stride_px,
        pixel_size_um,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    path.with_file_name(name)
}

/// Persist a feature volume as a tensor file plus a text sidecar holding the
/// window geometry.
pub fn write_feature_volume(path: &Path, vol: &FeatureVolume) -> Result<()> {
    write_tensor(path, &vol.values)?;
    let mut meta = String::from("pli-featvol 1\n");
    let _ = writeln!(meta, "patch_px {}", vol.patch_px);
    let _ = writeln!(meta, "stride_px {}", vol.stride_px);
    let _ = writeln!(meta, "pixel_size_um {}", vol.pixel_size_um);
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

/// Read a feature volume written by [`write_feature_volume`].
pub fn read_feature_volume(path: &Path) -> Result<FeatureVolume> {
    let values = read_tensor::<f32>(path)?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::format("feature volume tensor is not 4-dimensional"))?;
    let meta = fs::read_to_string(sidecar_path(path))?;
    let mut lines = meta.lines();
    if lines.next().map(str::trim) != Some("pli-featvol 1") {
        return Err(Error::format("unrecognized feature volume sidecar"));
    }
    let mut patch_px = None;
    let mut stride_px = None;
    let mut pixel_size_um = None;
    for line in lines {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some("patch_px"), Some(v)) => patch_px = v.parse::<usize>().ok(),
            (Some("stride_px"), Some(v)) => stride_px = v.parse::<usize>().ok(),
            (Some("pixel_size_um"), Some(v)) => pixel_size_um = v.parse::<f64>().ok(),
            _ => {}
        }
    }
    match (patch_px, stride_px, pixel_size_um) {
        (Some(p), Some(s), Some(px)) if s > 0 => Ok(FeatureVolume {
            values,
            patch_px: p,
            stride_px: s,
            pixel_size_um: px,
        }),
        _ => Err(Error::format("feature volume sidecar lacks window geometry")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::{EncoderConfig, ModalitySet};
    use ndarray::Array3;
    use tempfile::tempdir;

    fn tiny_params(patch_px: usize, modality: ModalitySet) -> EncoderParams {
        EncoderParams::init(&EncoderConfig::tiny(), modality, patch_px, [0.0, 100.0], 3).unwrap()
    }

    fn textured_maps(h: usize, w: usize) -> Array3<f32> {
        let mut m = Array3::<f32>::zeros((4, h, w));
        for y in 0..h {
            for x in 0..w {
                m[[0, y, x]] = 20.0 + (0.3 * y as f32).sin() * 10.0 + 0.1 * x as f32;
                m[[1, y, x]] = ((y * 7 + x * 3) % 180) as f32;
                m[[2, y, x]] = 0.5 + 0.4 * ((x as f32 * 0.2).cos());
                m[[3, y, x]] = 30.0;
            }
        }
        m
    }

    #[test]
    fn stride_respects_overlap_and_integrality() {
        assert_eq!(stride_for(128, 0.5).unwrap(), 64);
        assert_eq!(stride_for(32, 0.5).unwrap(), 16);
        assert_eq!(stride_for(64, 0.0).unwrap(), 64);
        assert!(stride_for(30, 0.37).is_err());
        assert!(stride_for(16, 1.0).is_err());
        assert!(stride_for(16, -0.25).is_err());
    }

    #[test]
    fn grid_shape_follows_window_arithmetic() {
        // Half-overlapping 128 px windows on a 256 px section: three per axis.
        assert_eq!(grid_extent(256, 128, 64), 3);
        // Full-scale raster arithmetic (no padding).
        assert_eq!(grid_extent(26_757, 128, 64), 417);
        assert_eq!(grid_extent(22_734, 128, 64), 354);
    }

    #[test]
    fn feature_map_grid_matches_extents_and_is_deterministic() {
        let params = tiny_params(16, ModalitySet::Full);
        let maps = textured_maps(48, 64);
        let f = feature_maps(&params, &maps.view(), 0.5).unwrap();
        assert_eq!(f.dim(), (5, 7, 4));
        let g = feature_maps(&params, &maps.view(), 0.5).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn constant_sections_give_identical_vectors() {
        let params = tiny_params(16, ModalitySet::ItOnly);
        let maps = Array3::<f32>::from_elem((4, 48, 48), 42.0);
        let f = feature_maps(&params, &maps.view(), 0.5).unwrap();
        let (gh, gw, c) = f.dim();
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    assert_eq!(f[[gy, gx, ch]], f[[0, 0, ch]]);
                }
            }
        }
    }

    #[test]
    fn shifting_by_one_stride_shifts_the_grid() {
        let params = tiny_params(16, ModalitySet::Full);
        let tall = textured_maps(72, 48);
        let a = feature_maps(&params, &tall.slice(s![.., 0..64, ..]), 0.5).unwrap();
        let b = feature_maps(&params, &tall.slice(s![.., 8..72, ..]), 0.5).unwrap();
        let (gh, gw, c) = a.dim();
        for gy in 1..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    let d = (a[[gy, gx, ch]] - b[[gy - 1, gx, ch]]).abs();
                    assert!(d < 1e-5, "cell ({gy},{gx},{ch}) drifted by {d}");
                }
            }
        }
    }

    #[test]
    fn undersized_sections_are_rejected() {
        let params = tiny_params(64, ModalitySet::Full);
        let maps = textured_maps(32, 96);
        assert!(feature_maps(&params, &maps.view(), 0.5).is_err());
    }

    #[test]
    fn stacking_orders_sections_and_requires_contiguity() {
        let sec = |fill: f32| Array3::<f32>::from_elem((3, 2, 5), fill);
        let vol = stack_volume(
            &[(1, sec(1.0)), (0, sec(0.0)), (2, sec(2.0))],
            16,
            8,
            10.0,
        )
        .unwrap();
        assert_eq!(vol.values.dim(), (3, 3, 2, 5));
        for y in 0..3 {
            assert_eq!(vol.values[[0, y, 0, 0]], y as f32);
        }
        let gap = stack_volume(&[(0, sec(0.0)), (2, sec(2.0))], 16, 8, 10.0);
        let err = gap.unwrap_err().to_string();
        assert!(err.contains("gap in section sequence"), "{err}");
        let shapes = stack_volume(
            &[(0, sec(0.0)), (1, Array3::<f32>::zeros((2, 2, 5)))],
            16,
            8,
            10.0,
        );
        assert!(shapes.is_err());
    }

    #[test]
    fn volume_roundtrips_through_disk() {
        let sec = |fill: f32| Array3::<f32>::from_elem((2, 2, 3), fill);
        let vol = stack_volume(&[(0, sec(0.25)), (1, sec(-1.5))], 32, 16, 1.3).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("features.plt");
        write_feature_volume(&path, &vol).unwrap();
        let back = read_feature_volume(&path).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn grid_coordinates_center_on_windows() {
        let vol = FeatureVolume {
            values: Array4::<f32>::zeros((3, 1, 3, 2)),
            patch_px: 16,
            stride_px: 8,
            pixel_size_um: 10.0,
        };
        // Window 0 is centered at voxel 7.5; one stride later is grid node 1.
        assert!((vol.grid_coord(7.5) - 0.0).abs() < 1e-12);
        assert!((vol.grid_coord(15.5) - 1.0).abs() < 1e-12);
        assert!((vol.grid_coord(11.5) - 0.5).abs() < 1e-12);
    }
}
