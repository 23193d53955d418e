//! Spatial positive-pair sampling and patch extraction.
//!
//! Positives are drawn at a fixed physical distance from the anchor: on a
//! circle within the section (CL-2D) or on a sphere whose axial component is
//! snapped to a reachable neighboring section (CL-3D). All coordinates are
//! voxel indices `(section, row, col)`.

use ndarray::{Array3, Array4, ArrayView3};
use rand::Rng;

use crate::error::{Error, Result};

/// Positive-pair geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Positives from a circle in the anchor's own section.
    Cl2d,
    /// Positives from a sphere, never in the anchor's section.
    Cl3d,
}

/// Which parameter-map channels feed the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalitySet {
    /// Normalized transmittance, retardation, and the direction pair.
    Full,
    /// Normalized transmittance only.
    ItOnly,
    /// Retardation and the direction pair, no transmittance.
    PhiROnly,
}

impl ModalitySet {
    #[must_use]
    pub fn n_channels(self) -> usize {
        match self {
            ModalitySet::Full => 4,
            ModalitySet::ItOnly => 1,
            ModalitySet::PhiROnly => 3,
        }
    }

    /// Index of the transmittance channel in the patch, if present.
    #[must_use]
    pub fn it_channel(self) -> Option<usize> {
        match self {
            ModalitySet::Full | ModalitySet::ItOnly => Some(0),
            ModalitySet::PhiROnly => None,
        }
    }

    /// Indices of the (sin 2φ, cos 2φ) channels in the patch, if present.
    #[must_use]
    pub fn direction_channels(self) -> Option<(usize, usize)> {
        match self {
            ModalitySet::Full => Some((2, 3)),
            ModalitySet::ItOnly => None,
            ModalitySet::PhiROnly => Some((1, 2)),
        }
    }

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            ModalitySet::Full => "full",
            ModalitySet::ItOnly => "it_only",
            ModalitySet::PhiROnly => "phir_only",
        }
    }

    pub fn parse(s: &str) -> Result<ModalitySet> {
        match s {
            "full" => Ok(ModalitySet::Full),
            "it_only" => Ok(ModalitySet::ItOnly),
            "phir_only" => Ok(ModalitySet::PhiROnly),
            other => Err(Error::config(format!("unknown modality set '{other}'"))),
        }
    }
}

/// Voxel location of a patch center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Loc {
    pub section: usize,
    pub row: usize,
    pub col: usize,
}

/// Geometry of positive-pair sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSamplerConfig {
    pub mode: SamplerMode,
    /// Pair distance in micrometers.
    pub radius_um: f64,
    /// In-plane pixel size in micrometers.
    pub pixel_size_um: f64,
    /// Distance between neighboring sections in micrometers.
    pub section_thickness_um: f64,
    /// Volume extents `[n_sections, rows, cols]`.
    pub volume_dims: [usize; 3],
    /// Side length of extracted square patches, in pixels (even).
    pub patch_px: usize,
}

impl Default for PairSamplerConfig {
    fn default() -> Self {
        PairSamplerConfig {
            mode: SamplerMode::Cl3d,
            radius_um: 118.0,
            pixel_size_um: 1.3,
            section_thickness_um: 60.0,
            volume_dims: [16, 512, 512],
            patch_px: 128,
        }
    }
}

impl PairSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius_um > 0.0) {
            return Err(Error::invalid("sampling radius must be positive"));
        }
        if !(self.pixel_size_um > 0.0) || !(self.section_thickness_um > 0.0) {
            return Err(Error::invalid("pixel size and section thickness must be positive"));
        }
        if self.patch_px < 2 || self.patch_px % 2 != 0 {
            return Err(Error::invalid("patch size must be even and at least 2"));
        }
        let [s, h, w] = self.volume_dims;
        if self.patch_px > h || self.patch_px > w {
            return Err(Error::invalid(format!(
                "patch {} px does not fit volume {h}x{w}",
                self.patch_px
            )));
        }
        if self.mode == SamplerMode::Cl3d {
            if self.radius_um < self.section_thickness_um {
                return Err(Error::invalid(
                    "CL-3D radius must reach at least one section away",
                ));
            }
            if s < 2 {
                return Err(Error::invalid("CL-3D needs at least two sections"));
            }
        } else if s < 1 {
            return Err(Error::invalid("volume needs at least one section"));
        }
        Ok(())
    }

    /// Valid patch-center range along one in-plane axis, inclusive.
    fn center_range(&self, extent: usize) -> (usize, usize) {
        let half = self.patch_px / 2;
        (half, extent - half)
    }
}

const MAX_DRAWS: usize = 10_000;

/// Draw one anchor/positive pair over the full section range.
pub fn sample_pair<R: Rng>(cfg: &PairSamplerConfig, rng: &mut R) -> Result<(Loc, Loc)> {
    sample_pair_in(cfg, rng, 0, cfg.volume_dims[0])
}

/// Draw one anchor/positive pair with both sections inside `[lo, hi)`.
pub fn sample_pair_in<R: Rng>(
    cfg: &PairSamplerConfig,
    rng: &mut R,
    lo: usize,
    hi: usize,
) -> Result<(Loc, Loc)> {
    cfg.validate()?;
    let [s, h, w] = cfg.volume_dims;
    let hi = hi.min(s);
    if lo >= hi {
        return Err(Error::invalid("empty section range for pair sampling"));
    }
    if cfg.mode == SamplerMode::Cl3d && hi - lo < 2 {
        return Err(Error::invalid("CL-3D pair sampling needs two sections in range"));
    }
    let (rlo, rhi) = cfg.center_range(h);
    let (clo, chi) = cfg.center_range(w);
    let anchor = Loc {
        section: rng.gen_range(lo..hi),
        row: rng.gen_range(rlo..=rhi),
        col: rng.gen_range(clo..=chi),
    };
    for _ in 0..MAX_DRAWS {
        let (d_section, dr, dc) = match cfg.mode {
            SamplerMode::Cl2d => {
                let beta = rng.gen::<f64>() * std::f64::consts::TAU;
                let d_px = cfg.radius_um / cfg.pixel_size_um;
                (0i64, d_px * beta.sin(), d_px * beta.cos())
            }
            SamplerMode::Cl3d => {
                let u: f64 = rng.gen_range(-1.0..=1.0);
                let beta = rng.gen::<f64>() * std::f64::consts::TAU;
                let k = (cfg.radius_um * u / cfg.section_thickness_um).round() as i64;
                if k == 0 {
                    continue;
                }
                let axial = k as f64 * cfg.section_thickness_um;
                if axial.abs() >= cfg.radius_um {
                    continue;
                }
                let in_plane = (cfg.radius_um * cfg.radius_um - axial * axial).sqrt()
                    / cfg.pixel_size_um;
                (k, in_plane * beta.sin(), in_plane * beta.cos())
            }
        };
        let section = anchor.section as i64 + d_section;
        if section < lo as i64 || section >= hi as i64 {
            continue;
        }
        let row = anchor.row as i64 + dr.round() as i64;
        let col = anchor.col as i64 + dc.round() as i64;
        if row < rlo as i64 || row > rhi as i64 || col < clo as i64 || col > chi as i64 {
            continue;
        }
        return Ok((
            anchor,
            Loc {
                section: section as usize,
                row: row as usize,
                col: col as usize,
            },
        ));
    }
    Err(Error::invalid(
        "could not place a positive pair; volume too small for the sampling radius",
    ))
}

/// Min/max of the transmittance channel over a section range, for
/// normalization computed on the training split.
pub fn transmittance_range(maps: &Array4<f32>, lo: usize, hi: usize) -> Result<[f32; 2]> {
    let (s, c, _, _) = maps.dim();
    if c != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {c}")));
    }
    if lo >= hi || hi > s {
        return Err(Error::invalid("bad section range for transmittance stats"));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for y in lo..hi {
        for &v in maps
            .index_axis(ndarray::Axis(0), y)
            .index_axis(ndarray::Axis(0), 0)
            .iter()
        {
            min = min.min(v);
            max = max.max(v);
        }
    }
    if !(max > min) {
        return Err(Error::invalid("degenerate transmittance range"));
    }
    Ok([min, max])
}

/// Cut a modality patch from one section's `[4, H, W]` parameter maps.
///
/// The transmittance channel is scaled by the given `[min, max]` range; the
/// direction is encoded as (sin 2φ, cos 2φ).
pub fn extract_patch(
    section_maps: &ArrayView3<'_, f32>,
    center: Loc,
    patch_px: usize,
    modality: ModalitySet,
    it_range: [f32; 2],
) -> Result<Array3<f32>> {
    let (c, h, w) = section_maps.dim();
    if c != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {c}")));
    }
    let half = patch_px / 2;
    if center.row < half || center.col < half || center.row + half > h || center.col + half > w {
        return Err(Error::invalid(format!(
            "patch at ({}, {}) exceeds section bounds {h}x{w}",
            center.row, center.col
        )));
    }
    let r0 = center.row - half;
    let c0 = center.col - half;
    let span = it_range[1] - it_range[0];
    if !(span > 0.0) {
        return Err(Error::invalid("degenerate transmittance range"));
    }
    let mut out = Array3::<f32>::zeros((modality.n_channels(), patch_px, patch_px));
    for yy in 0..patch_px {
        for xx in 0..patch_px {
            let it = section_maps[[0, r0 + yy, c0 + xx]];
            let phi = section_maps[[1, r0 + yy, c0 + xx]];
            let r = section_maps[[2, r0 + yy, c0 + xx]];
            let two_phi = 2.0 * f64::from(phi).to_radians();
            let it_n = (it - it_range[0]) / span;
            match modality {
                ModalitySet::Full => {
                    out[[0, yy, xx]] = it_n;
                    out[[1, yy, xx]] = r;
                    out[[2, yy, xx]] = two_phi.sin() as f32;
                    out[[3, yy, xx]] = two_phi.cos() as f32;
                }
                ModalitySet::ItOnly => {
                    out[[0, yy, xx]] = it_n;
                }
                ModalitySet::PhiROnly => {
                    out[[0, yy, xx]] = r;
                    out[[1, yy, xx]] = two_phi.sin() as f32;
                    out[[2, yy, xx]] = two_phi.cos() as f32;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn paper_cfg(mode: SamplerMode) -> PairSamplerConfig {
        PairSamplerConfig {
            mode,
            volume_dims: [12, 512, 512],
            ..PairSamplerConfig::default()
        }
    }

    fn distance_um(cfg: &PairSamplerConfig, a: Loc, p: Loc) -> f64 {
        let dr = (a.row as f64 - p.row as f64) * cfg.pixel_size_um;
        let dc = (a.col as f64 - p.col as f64) * cfg.pixel_size_um;
        let ds = (a.section as f64 - p.section as f64) * cfg.section_thickness_um;
        (dr * dr + dc * dc + ds * ds).sqrt()
    }

    #[test]
    fn circle_pairs_stay_in_section_at_the_target_radius() {
        let cfg = paper_cfg(SamplerMode::Cl2d);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (a, p) = sample_pair(&cfg, &mut rng).unwrap();
            assert_eq!(a.section, p.section);
            let dr = a.row as f64 - p.row as f64;
            let dc = a.col as f64 - p.col as f64;
            let d_px = (dr * dr + dc * dc).sqrt();
            // 118 um at 1.3 um/px is 90.77 px; each axis rounds by half a pixel.
            assert!((d_px - 90.77).abs() <= 0.71, "displacement {d_px:.2} px");
        }
    }

    #[test]
    fn sphere_pairs_change_section_by_one_with_matching_in_plane_offset() {
        let cfg = paper_cfg(SamplerMode::Cl3d);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_up = false;
        let mut saw_down = false;
        for _ in 0..500 {
            let (a, p) = sample_pair(&cfg, &mut rng).unwrap();
            let ds = p.section as i64 - a.section as i64;
            assert_eq!(ds.abs(), 1, "section step {ds}");
            saw_up |= ds == 1;
            saw_down |= ds == -1;
            let dr = a.row as f64 - p.row as f64;
            let dc = a.col as f64 - p.col as f64;
            let d_px = (dr * dr + dc * dc).sqrt();
            // sqrt(118^2 - 60^2) / 1.3 = 78.19 px.
            assert!((d_px - 78.19).abs() <= 0.71, "in-plane {d_px:.2} px");
            assert!(
                (distance_um(&cfg, a, p) - 118.0).abs() <= 30.0,
                "distance {:.2} um",
                distance_um(&cfg, a, p)
            );
        }
        assert!(saw_up && saw_down);
    }

    #[test]
    fn section_range_restriction_holds() {
        let cfg = paper_cfg(SamplerMode::Cl3d);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (a, p) = sample_pair_in(&cfg, &mut rng, 4, 12).unwrap();
            assert!(a.section >= 4 && a.section < 12);
            assert!(p.section >= 4 && p.section < 12);
        }
    }

    #[test]
    fn patch_windows_always_fit() {
        // Rows leave only three valid centers, so nearly every direction is
        // redrawn; the anchor is kept, which means the column span must cover
        // a full displacement to either side for every anchor position.
        let cfg = PairSamplerConfig {
            mode: SamplerMode::Cl2d,
            volume_dims: [2, 130, 320],
            ..PairSamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let (a, p) = sample_pair(&cfg, &mut rng).unwrap();
            for l in [a, p] {
                assert!(l.row >= 64 && l.row + 64 <= 130);
                assert!(l.col >= 64 && l.col + 64 <= 320);
            }
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let cfg = PairSamplerConfig {
            volume_dims: [4, 100, 100],
            ..PairSamplerConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
    }

    #[test]
    fn sphere_mode_requires_reachable_sections() {
        let cfg = PairSamplerConfig {
            mode: SamplerMode::Cl3d,
            radius_um: 40.0,
            ..PairSamplerConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PairSamplerConfig {
            mode: SamplerMode::Cl3d,
            volume_dims: [1, 512, 512],
            ..PairSamplerConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn modality_channel_layout() {
        assert_eq!(ModalitySet::Full.n_channels(), 4);
        assert_eq!(ModalitySet::ItOnly.n_channels(), 1);
        assert_eq!(ModalitySet::PhiROnly.n_channels(), 3);
        assert_eq!(ModalitySet::Full.direction_channels(), Some((2, 3)));
        assert_eq!(ModalitySet::PhiROnly.direction_channels(), Some((1, 2)));
        assert_eq!(ModalitySet::ItOnly.direction_channels(), None);
        assert_eq!(ModalitySet::PhiROnly.it_channel(), None);
        for m in [ModalitySet::Full, ModalitySet::ItOnly, ModalitySet::PhiROnly] {
            assert_eq!(ModalitySet::parse(m.name()).unwrap(), m);
        }
        assert!(ModalitySet::parse("all").is_err());
    }

    #[test]
    fn patch_extraction_normalizes_and_encodes_direction() {
        let mut maps = Array4::<f32>::zeros((1, 4, 8, 8));
        maps.index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_mut(ndarray::Axis(0), 0)
            .fill(60.0);
        maps[[0, 1, 4, 4]] = 30.0; // direction 30 degrees at the center
        maps[[0, 2, 4, 4]] = 0.5;
        let view = maps.index_axis(ndarray::Axis(0), 0);
        let patch = extract_patch(
            &view,
            Loc { section: 0, row: 4, col: 4 },
            4,
            ModalitySet::Full,
            [20.0, 100.0],
        )
        .unwrap();
        assert_eq!(patch.dim(), (4, 4, 4));
        assert_relative_eq!(patch[[0, 0, 0]], 0.5, epsilon = 1e-6); // (60-20)/80
        assert_relative_eq!(patch[[1, 2, 2]], 0.5, epsilon = 1e-6); // retardation
        assert_relative_eq!(patch[[2, 2, 2]], 60f32.to_radians().sin(), epsilon = 1e-6);
        assert_relative_eq!(patch[[3, 2, 2]], 60f32.to_radians().cos(), epsilon = 1e-6);
        let thin = extract_patch(
            &view,
            Loc { section: 0, row: 4, col: 4 },
            4,
            ModalitySet::ItOnly,
            [20.0, 100.0],
        )
        .unwrap();
        assert_eq!(thin.dim(), (1, 4, 4));
    }

    #[test]
    fn out_of_bounds_patch_is_rejected() {
        let maps = Array4::<f32>::zeros((1, 4, 8, 8));
        let view = maps.index_axis(ndarray::Axis(0), 0);
        let r = extract_patch(
            &view,
            Loc { section: 0, row: 1, col: 4 },
            4,
            ModalitySet::Full,
            [0.0, 1.0],
        );
        assert!(r.is_err());
    }

    #[test]
    fn transmittance_range_covers_requested_sections_only() {
        let mut maps = Array4::<f32>::zeros((3, 4, 2, 2));
        maps.index_axis_mut(ndarray::Axis(0), 0)
            .index_axis_mut(ndarray::Axis(0), 0)
            .fill(999.0);
        for y in 1..3 {
            for (i, v) in [10.0f32, 20.0, 30.0, 40.0].iter().enumerate() {
                maps[[y, 0, i / 2, i % 2]] = v + y as f32;
            }
        }
        let r = transmittance_range(&maps, 1, 3).unwrap();
        assert_eq!(r, [11.0, 42.0]);
    }

    proptest::proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sampled_pairs_respect_geometry(
            seed in 0u64..1000,
            sections in 2usize..8,
            extra_h in 0usize..80,
            extra_w in 0usize..80,
            mode_3d in proptest::bool::ANY,
        ) {
            let cfg = PairSamplerConfig {
                mode: if mode_3d { SamplerMode::Cl3d } else { SamplerMode::Cl2d },
                pixel_size_um: 10.0,
                patch_px: 16,
                volume_dims: [sections, 40 + extra_h, 40 + extra_w],
                ..PairSamplerConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, p) = sample_pair(&cfg, &mut rng).unwrap();
            for l in [a, p] {
                prop_assert!(l.section < sections);
                prop_assert!(l.row >= 8 && l.row + 8 <= cfg.volume_dims[1]);
                prop_assert!(l.col >= 8 && l.col + 8 <= cfg.volume_dims[2]);
            }
            if mode_3d {
                prop_assert!(a.section != p.section);
            } else {
                prop_assert_eq!(a.section, p.section);
            }
            // Pixel rounding moves each in-plane axis by at most half a pixel.
            let bound = cfg.section_thickness_um / 2.0
                + cfg.pixel_size_um * std::f64::consts::SQRT_2 / 2.0;
            prop_assert!((distance_um(&cfg, a, p) - cfg.radius_um).abs() <= bound);
        }
    }
}
