//! Classical per-patch texture features: fractional anisotropy of the
//! orientation scatter, plus mean transmittance.
//!
//! Direction/inclination pairs are projected onto axes of the unit sphere;
//! the eigenvalue spread of a patch's second-moment matrix gives a
//! fractional anisotropy in [0, 1]. Paired with the patch-mean transmittance
//! this yields a two-channel feature map on a regular patch grid.

use nalgebra::Matrix3;
use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::{CH_DIRECTION, CH_INCLINATION, CH_TRANSMITTANCE};

/// An orientation as a unit axis on the sphere.
///
/// Because in-plane directions are axial (φ and φ+180° describe the same
/// fiber), only the outer product of the axis ever enters the statistics and
/// the sign of the vector is immaterial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationSample(pub [f64; 3]);

impl OrientationSample {
    /// Project a direction/inclination pair (degrees) onto the unit sphere.
    #[must_use]
    pub fn from_angles_deg(direction_deg: f64, inclination_deg: f64) -> OrientationSample {
        let phi = direction_deg.to_radians();
        let alpha = inclination_deg.to_radians();
        let (sa, ca) = alpha.sin_cos();
        let (sp, cp) = phi.sin_cos();
        OrientationSample([ca * cp, ca * sp, sa])
    }

    #[must_use]
    pub fn norm(&self) -> f64 {
        let [x, y, z] = self.0;
        (x * x + y * y + z * z).sqrt()
    }
}

/// Second-moment matrix `(1/n) Σ v vᵀ` of a set of axes.
pub fn scatter_matrix(samples: &[OrientationSample]) -> Result<Matrix3<f64>> {
    if samples.len() < 3 {
        return Err(Error::invalid(
            "orientation scatter needs at least 3 samples",
        ));
    }
    let mut s = Matrix3::<f64>::zeros();
    for v in samples {
        let [x, y, z] = v.0;
        s[(0, 0)] += x * x;
        s[(0, 1)] += x * y;
        s[(0, 2)] += x * z;
        s[(1, 1)] += y * y;
        s[(1, 2)] += y * z;
        s[(2, 2)] += z * z;
    }
    let n = samples.len() as f64;
    s[(0, 0)] /= n;
    s[(0, 1)] /= n;
    s[(0, 2)] /= n;
    s[(1, 1)] /= n;
    s[(1, 2)] /= n;
    s[(2, 2)] /= n;
    s[(1, 0)] = s[(0, 1)];
    s[(2, 0)] = s[(0, 2)];
    s[(2, 1)] = s[(1, 2)];
    Ok(s)
}

/// Fractional anisotropy of the scatter eigenvalues, in [0, 1].
///
/// `FA = √(3/2) · √(Σ(λᵢ−λ̄)²) / √(Σλᵢ²)`; identical samples give 1,
/// isotropically spread samples give 0.
pub fn fractional_anisotropy(samples: &[OrientationSample]) -> Result<f64> {
    let s = scatter_matrix(samples)?;
    let eig = s.symmetric_eigenvalues();
    let (l1, l2, l3) = (eig[0], eig[1], eig[2]);
    let mean = (l1 + l2 + l3) / 3.0;
    let dev = (l1 - mean).powi(2) + (l2 - mean).powi(2) + (l3 - mean).powi(2);
    let sq = l1 * l1 + l2 * l2 + l3 * l3;
    if sq <= 0.0 {
        return Err(Error::invalid("orientation scatter is degenerate"));
    }
    let fa = (1.5 * dev / sq).sqrt();
    Ok(fa.clamp(0.0, 1.0))
}

/// Patch-grid extent along one axis: `floor((len − patch)/stride) + 1`.
#[must_use]
pub fn grid_extent(len: usize, patch_px: usize, stride_px: usize) -> usize {
    if patch_px > len {
        0
    } else {
        (len - patch_px) / stride_px + 1
    }
}

/// Two-channel baseline features for one section's `[4, H, W]` maps:
/// channel 0 is the fractional anisotropy of the patch orientations and
/// channel 1 the patch-mean transmittance. Patches tile the raster on a
/// `stride_px` grid (non-overlapping when the stride equals the patch).
pub fn baseline_feature_maps(
    section_maps: &ArrayView3<'_, f32>,
    patch_px: usize,
    stride_px: usize,
) -> Result<Array3<f32>> {
    let (c, h, w) = section_maps.dim();
    if c != 4 {
        return Err(Error::invalid(format!("expected 4 map channels, got {c}")));
    }
    if patch_px < 2 || stride_px == 0 {
        return Err(Error::invalid("patch must span at least 2 px and stride must be positive"));
    }
    if patch_px > h || patch_px > w {
        return Err(Error::invalid(format!(
            "raster {h}x{w} is smaller than one {patch_px} px patch"
        )));
    }
    let gh = grid_extent(h, patch_px, stride_px);
    let gw = grid_extent(w, patch_px, stride_px);
    let mut out = Array3::<f32>::zeros((2, gh, gw));
    let rows: Vec<Vec<(f32, f32)>> = (0..gh)
        .into_par_iter()
        .map(|gy| {
            let y0 = gy * stride_px;
            (0..gw)
                .map(|gx| {
                    let x0 = gx * stride_px;
                    let mut samples = Vec::with_capacity(patch_px * patch_px);
                    let mut it_sum = 0.0f64;
                    for y in y0..y0 + patch_px {
                        for x in x0..x0 + patch_px {
                            let phi = f64::from(section_maps[[CH_DIRECTION, y, x]]);
                            let alpha = f64::from(section_maps[[CH_INCLINATION, y, x]]);
                            samples.push(OrientationSample::from_angles_deg(phi, alpha));
                            it_sum += f64::from(section_maps[[CH_TRANSMITTANCE, y, x]]);
                        }
                    }
                    let fa = fractional_anisotropy(&samples).expect("patch has >= 4 samples");
                    let mean_it = it_sum / (patch_px * patch_px) as f64;
                    (fa as f32, mean_it as f32)
                })
                .collect()
        })
        .collect();
    for (gy, row) in rows.into_iter().enumerate() {
        for (gx, (fa, it)) in row.into_iter().enumerate() {
            out[[0, gy, gx]] = fa;
            out[[1, gy, gx]] = it;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn uniform_sphere(n: usize, seed: u64) -> Vec<OrientationSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                // Gaussian draws normalized to the sphere.
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                OrientationSample([v[0] / n, v[1] / n, v[2] / n])
            })
            .collect()
    }

    #[test]
    fn angle_projection_is_unit_norm() {
        for (phi, alpha) in [(0.0, 0.0), (45.0, 30.0), (170.0, 85.0), (90.0, -20.0)] {
            let v = OrientationSample::from_angles_deg(phi, alpha);
            assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
        }
        let up = OrientationSample::from_angles_deg(0.0, 90.0);
        assert_relative_eq!(up.0[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_samples_give_full_anisotropy() {
        let v = OrientationSample::from_angles_deg(30.0, 25.0);
        let fa = fractional_anisotropy(&vec![v; 50]).unwrap();
        assert_relative_eq!(fa, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coordinate_axes_are_isotropic() {
        let samples = vec![
            OrientationSample([1.0, 0.0, 0.0]),
            OrientationSample([0.0, 1.0, 0.0]),
            OrientationSample([0.0, 0.0, 1.0]),
        ];
        let s = scatter_matrix(&samples).unwrap();
        for i in 0..3 {
            assert_relative_eq!(s[(i, i)], 1.0 / 3.0, epsilon = 1e-15);
        }
        let fa = fractional_anisotropy(&samples).unwrap();
        assert!(fa.abs() < 1e-12, "FA {fa}");
    }

    #[test]
    fn uniform_sphere_loses_anisotropy() {
        let fa = fractional_anisotropy(&uniform_sphere(10_000, 8)).unwrap();
        assert!(fa.abs() < 0.05, "FA {fa}");
    }

    #[test]
    fn scatter_trace_is_one_for_unit_axes() {
        let samples = uniform_sphere(257, 3);
        let s = scatter_matrix(&samples).unwrap();
        assert_relative_eq!(s[(0, 0)] + s[(1, 1)] + s[(2, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_leaves_anisotropy_unchanged() {
        let samples = uniform_sphere(40, 5)
            .into_iter()
            .map(|v| OrientationSample([v.0[0] * 0.9, v.0[1] * 0.3, v.0[2]]))
            .map(|v| {
                let n = v.norm();
                OrientationSample([v.0[0] / n, v.0[1] / n, v.0[2] / n])
            })
            .collect::<Vec<_>>();
        let base = fractional_anisotropy(&samples).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let axis = nalgebra::Unit::new_normalize(nalgebra::Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let rot = nalgebra::Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..6.28));
            let rotated: Vec<OrientationSample> = samples
                .iter()
                .map(|v| {
                    let p = rot * nalgebra::Vector3::new(v.0[0], v.0[1], v.0[2]);
                    OrientationSample([p.x, p.y, p.z])
                })
                .collect();
            let fa = fractional_anisotropy(&rotated).unwrap();
            assert!((fa - base).abs() < 1e-9, "FA drifted by {}", fa - base);
        }
    }

    #[test]
    fn sign_flips_do_not_change_the_scatter() {
        let samples = uniform_sphere(31, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flipped: Vec<OrientationSample> = samples
            .iter()
            .map(|v| {
                if rng.gen::<bool>() {
                    OrientationSample([-v.0[0], -v.0[1], -v.0[2]])
                } else {
                    *v
                }
            })
            .collect();
        let a = fractional_anisotropy(&samples).unwrap();
        let b = fractional_anisotropy(&flipped).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples_are_rejected() {
        let v = OrientationSample([1.0, 0.0, 0.0]);
        assert!(fractional_anisotropy(&[v, v]).is_err());
    }

    #[test]
    fn wider_dispersion_lowers_anisotropy() {
        let spread = |sigma_deg: f64, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<OrientationSample> = (0..400)
                .map(|_| {
                    let phi = 40.0 + sigma_deg * rng.sample::<f64, _>(StandardNormal);
                    let alpha = 20.0 + sigma_deg * rng.sample::<f64, _>(StandardNormal);
                    OrientationSample::from_angles_deg(phi, alpha)
                })
                .collect();
            fractional_anisotropy(&samples).unwrap()
        };
        let tight = spread(4.0, 2);
        let loose = spread(25.0, 2);
        assert!(
            tight > loose + 0.05,
            "tight {tight} should exceed loose {loose}"
        );
    }

    fn constant_maps(h: usize, w: usize, it: f32, phi: f32, alpha: f32) -> Array3<f32> {
        let mut m = Array3::<f32>::zeros((4, h, w));
        for y in 0..h {
            for x in 0..w {
                m[[CH_TRANSMITTANCE, y, x]] = it;
                m[[CH_DIRECTION, y, x]] = phi;
                m[[CH_INCLINATION, y, x]] = alpha;
            }
        }
        m
    }

    #[test]
    fn constant_raster_maps_to_unit_fa_and_its_mean() {
        let m = constant_maps(128, 128, 72.5, 33.0, 18.0);
        let f = baseline_feature_maps(&m.view(), 64, 64).unwrap();
        assert_eq!(f.dim(), (2, 2, 2));
        for gy in 0..2 {
            for gx in 0..2 {
                assert_relative_eq!(f[[0, gy, gx]], 1.0, epsilon = 1e-6);
                assert_relative_eq!(f[[1, gy, gx]], 72.5, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn stride_override_densifies_the_grid() {
        let m = constant_maps(128, 96, 10.0, 0.0, 0.0);
        let f = baseline_feature_maps(&m.view(), 64, 32).unwrap();
        assert_eq!(f.dim(), (2, 3, 2));
        assert_eq!(grid_extent(128, 64, 32), 3);
        assert_eq!(grid_extent(96, 64, 32), 2);
        assert_eq!(grid_extent(128, 64, 64), 2);
    }

    #[test]
    fn undersized_rasters_are_rejected() {
        let m = constant_maps(32, 32, 1.0, 0.0, 0.0);
        assert!(baseline_feature_maps(&m.view(), 64, 64).is_err());
    }

    #[test]
    fn mean_transmittance_averages_patch_values() {
        let mut m = constant_maps(8, 8, 0.0, 10.0, 10.0);
        for y in 0..8 {
            for x in 0..8 {
                m[[CH_TRANSMITTANCE, y, x]] = (y * 8 + x) as f32;
            }
        }
        let f = baseline_feature_maps(&m.view(), 8, 8).unwrap();
        assert_eq!(f.dim(), (2, 1, 1));
        assert_relative_eq!(f[[1, 0, 0]], 31.5, epsilon = 1e-4);
    }
}
